import streamlit as st

from scripts.backend.cuem.config import load_settings
from scripts.backend.cuem.pipeline import Variant
from scripts.backend.cuem.runtime import build_runtime
from scripts.backend.cuem.utils import configure_logging
from scripts.frontend.tabs.analytics import render_analytics
from scripts.frontend.tabs.ask import render_ask
from scripts.frontend.tabs.evaluation import render_evaluation
from scripts.frontend.tabs.history import render_history
from scripts.frontend.tabs.safety_db import render_safety_db


@st.cache_resource
def get_runtime():
    settings = load_settings()
    configure_logging(settings.log_level)
    return build_runtime(settings)


def run_app():
    st.set_page_config(
        page_title="CUE-M Console",
        page_icon="▶",
        layout="wide",
        initial_sidebar_state="expanded"
    )

    if 'chat' not in st.session_state:
        st.session_state['chat'] = []

    st.markdown("""
    <style>
        .stApp {
            background: linear-gradient(135deg, #0a0e27 0%, #1a1d3a 50%, #2a1d4a 100%);
            color: #E8EAED;
        }
        h1, h2, h3, h4 { color: #FFFFFF !important; }
        div[data-testid="stMetric"] {
            background: linear-gradient(135deg, rgba(91, 86, 233, 0.15) 0%, rgba(30, 33, 57, 0.9) 100%);
            padding: 1.2rem;
            border-radius: 16px;
            border: 1px solid rgba(91, 86, 233, 0.3);
        }
        .stTabs [aria-selected="true"] {
            background: linear-gradient(135deg, #5B56E9 0%, #7B6AFF 50%, #9B86FF 100%) !important;
            color: #FFFFFF !important;
            border-radius: 12px;
        }
        .answer-box {
            background: rgba(30, 33, 57, 0.9);
            border: 1px solid rgba(91, 86, 233, 0.3);
            border-radius: 12px;
            padding: 1.2rem;
        }
    </style>
    """, unsafe_allow_html=True)

    st.markdown("# CUE-M Console")
    st.caption("Multimodal search with image-enriched retrieval, intent refinement and a layered safety cascade.")

    try:
        runtime = get_runtime()
    except Exception as e:
        st.error(f"Could not start the engine: {e}")
        return

    with st.sidebar:
        st.markdown("### ⚙ Engine")
        settings = runtime.settings
        st.write(f"**Backends:** {settings.backend_mode}")
        st.write(f"**Config:** {settings.source or 'bundled fixtures'}")
        unreachable = runtime.not_ready()
        if unreachable:
            st.error("Unreachable backends: " + ", ".join(unreachable))
        else:
            st.success("Backends ready")
        variant = st.selectbox("Pipeline variant", [v.value for v in Variant], index=len(Variant) - 1)
        if st.button("Clear chat"):
            st.session_state['chat'] = []

    tab1, tab2, tab3, tab4, tab5 = st.tabs([
        "🔎 Ask", "🛡 Safety DB", "⚖ Evaluation", "📚 History", "📊 Analytics"
    ])

    with tab1:
        render_ask(runtime, Variant(variant))

    with tab2:
        render_safety_db(runtime)

    with tab3:
        render_evaluation(runtime)

    with tab4:
        render_history(runtime)

    with tab5:
        render_analytics(runtime)
