import pandas as pd
import streamlit as st

from scripts.backend.cuem.utils import canonical_json


def render_history(runtime):
    st.markdown("## 📚 Trace History")

    records = runtime.traces.recent(limit=100)
    if not records:
        st.info("No stored traces yet. Run a query in the Ask tab.")
        return

    st.caption(f"**{len(records)}** most recent traces")
    for idx, rec in enumerate(records):
        label = rec.get("query") or "(image only)"
        with st.expander(f"**{label}** | {rec['saved_at']} | {rec['decision']}", expanded=(idx == 0)):
            col_det, col_stages = st.columns([1, 2])

            with col_det:
                st.metric("Verdict", rec["decision"])
                st.metric("Final stage", rec["stage"])
                st.write(f"**Trace id:** `{rec['trace_id']}`")
                if rec.get("answer"):
                    st.write(rec["answer"])
                st.download_button("Download trace JSON", canonical_json(rec), file_name=f"trace_{rec['trace_id']}.json",
                                   key=f"trace_{idx}", type="secondary", width='stretch')

            with col_stages:
                stages = rec["trace"]["stages"]
                st.dataframe(pd.DataFrame([
                    {"Stage": s["stage_name"], "Calls": s["backend_calls"], "Elapsed (ms)": s["elapsed_ms"],
                     "Warnings": "; ".join(s["warnings"])}
                    for s in stages
                ]), width='stretch')
