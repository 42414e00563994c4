import pandas as pd
import streamlit as st

from scripts.backend.cuem.errors import CuemError


def render_safety_db(runtime):
    st.markdown("## 🛡 Instance Safety Database")
    st.caption("Known unsafe queries answered with a fixed response when a new query lands close enough.")

    db = runtime.instances.snapshot()
    c1, c2 = st.columns(2)
    c1.metric("Entries", len(db))
    c2.metric("Threshold", f"{runtime.cfg.instance_similarity_threshold:.2f}")

    if len(db):
        st.dataframe(pd.DataFrame([
            {"Id": e.id, "Query": e.query_text, "Canned response": e.canned_response}
            for e in db.entries
        ]), width='stretch')
    else:
        st.info("The database is empty.")

    st.markdown("#### Add an entry")
    with st.form("add_instance", clear_on_submit=True):
        entry_id = st.text_input("Id")
        query_text = st.text_input("Unsafe query")
        canned = st.text_area("Canned response")
        submitted = st.form_submit_button("Add")
    if submitted:
        try:
            runtime.add_instance(entry_id.strip(), query_text.strip(), canned.strip())
            st.toast(f"Added {entry_id}")
            st.rerun()
        except (CuemError, ValueError) as e:
            st.error(f"Could not add entry: {e}")
