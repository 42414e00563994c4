import html

import pandas as pd
import streamlit as st

from scripts.backend.cuem.errors import CuemError


def _stage_table(trace):
    return pd.DataFrame([
        {
            "Stage": s.stage_name,
            "Backend calls": s.backend_calls,
            "Elapsed (ms)": s.elapsed_ms,
            "Warnings": "; ".join(s.warnings),
        }
        for s in trace.stages
    ])


def answer_html(text):
    """Answer box markup; the model text is escaped, only the wrapper is HTML."""
    return f"<div class='answer-box'>{html.escape(text)}</div>"


def render_ask(runtime, variant):
    st.markdown("## 🔎 Ask")
    st.caption("Pick a registered image (or none), type a question and run the pipeline.")

    col_in, col_out = st.columns([1, 2])

    with col_in:
        image_ids = ["(no image)"] + runtime.images.ids()
        image_choice = st.selectbox("Image", image_ids, key="ask_image")
        text = st.text_area("Question", key="ask_text", height=100)
        use_history = st.checkbox("Send chat history", value=True)
        run = st.button("Search & Answer", type="primary", width='stretch')

    if not run:
        with col_out:
            st.info("The answer, safety verdicts and stage trace will appear here.")
        return

    history = []
    if use_history:
        for turn in st.session_state['chat']:
            history.extend([("user", turn["question"]), ("assistant", turn["answer"] or "")])
    image_id = None if image_choice == "(no image)" else image_choice

    with col_out:
        try:
            with st.spinner("Running pipeline..."):
                _, result = runtime.ask(text, image_id, history, variant=variant)
        except CuemError as e:
            st.error(str(e))
            return

        if result.answer is not None:
            st.markdown(answer_html(result.answer.text), unsafe_allow_html=True)
        elif result.text:
            st.warning(result.text)
        else:
            st.error(f"Blocked at {result.safety.stage.value}.")

        m1, m2, m3 = st.columns(3)
        m1.metric("Verdict", result.safety.decision.value)
        m2.metric("Stages", len(result.trace.stages))
        m3.metric("Backend calls", sum(s.backend_calls for s in result.trace.stages))

        if result.refined is not None:
            st.markdown("#### Refined intent")
            st.write(result.refined.intent_text)
            st.caption(f"Search query: {result.refined.search_query}")

        if result.curated:
            st.markdown("#### Curated documents")
            st.dataframe(pd.DataFrame([
                {"Id": d.id, "Title": d.title, "Source": d.source.value,
                 "Relevance": d.relevance_score, "Retrieval": d.retrieval_score}
                for d in result.curated
            ]), width='stretch')

        st.markdown("#### Stage trace")
        st.caption(f"Trace id `{result.trace.trace_id}`")
        st.dataframe(_stage_table(result.trace), width='stretch')

    st.session_state['chat'].append({"question": text, "answer": result.answer.text if result.answer else None})
