import pandas as pd
import streamlit as st


def render_analytics(runtime):
    st.markdown("## 📊 Analytics")

    records = runtime.traces.recent(limit=1000)
    if not records:
        st.info("Run some queries to see stage timings and safety outcomes.")
        return

    decisions = pd.Series([r["decision"] for r in records]).value_counts()
    g1, g2, g3 = st.columns(3)
    g1.metric("Stored traces", len(records))
    g2.metric("Answered", int(decisions.get("allow", 0)))
    g3.metric("Blocked or canned", int(decisions.get("block", 0) + decisions.get("canned", 0)))

    rows = [
        {"Stage": s["stage_name"], "Elapsed (ms)": s["elapsed_ms"], "Calls": s["backend_calls"]}
        for r in records for s in r["trace"]["stages"]
    ]
    per_stage = pd.DataFrame(rows).groupby("Stage").agg(["mean", "max"])
    per_stage.columns = [" ".join(c) for c in per_stage.columns]

    tab_latency, tab_safety = st.tabs(["⏱️ Stage latency", "🛡 Safety outcomes"])
    with tab_latency:
        st.bar_chart(per_stage["Elapsed (ms) mean"], width='stretch')
        st.dataframe(per_stage, width='stretch')
    with tab_safety:
        stops = pd.Series([r["stage"] for r in records if r["decision"] != "allow"], dtype="object").value_counts()
        if stops.empty:
            st.caption("No query has been stopped yet.")
        else:
            st.bar_chart(stops, width='stretch')
