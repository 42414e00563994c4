import json

import pandas as pd
import streamlit as st

from scripts.backend.cuem.errors import CuemError
from scripts.backend.cuem.evaluation import EvalCase, evaluate_cases
from scripts.backend.cuem.utils import to_jsonable


def render_evaluation(runtime):
    st.markdown("## ⚖ Evaluation")
    st.caption("Order-swapped pairwise judging of candidate vs baseline answers, plus ROUGE-L, NER recall and EVQA accuracy.")

    upload = st.file_uploader("Case file (JSON-lines)", type=['jsonl', 'json'], key='eval_upload')
    strict = st.checkbox("Strict judge (no ties)")
    if not upload:
        st.info("Each line: case_id, query, candidate, baseline, reference and optionally gold.")
        return

    try:
        cases = [EvalCase.from_dict(json.loads(line)) for line in upload.getvalue().decode("utf-8").splitlines()
                 if line.strip()]
    except (ValueError, TypeError) as e:
        st.error(f"Could not read cases: {e}")
        return

    if st.button("Run evaluation", type="primary"):
        try:
            with st.spinner(f"Judging {len(cases)} cases..."):
                report = evaluate_cases(cases, runtime.backends.fresh(), runtime.registries.templates,
                                        strict=strict, max_workers=runtime.cfg.max_workers)
        except CuemError as e:
            st.error(str(e))
            return

        k1, k2, k3, k4 = st.columns(4)
        k1.metric("Win rate", "n/a" if report.win_rate is None else f"{report.win_rate:.3f}",
                  delta=None if report.se is None else f"± {report.se:.3f}", delta_color="off")
        k2.metric("ROUGE-L", "n/a" if report.rouge_l is None else f"{report.rouge_l:.3f}")
        k3.metric("NER recall", "n/a" if report.ner_recall is None else f"{report.ner_recall:.3f}")
        k4.metric("EVQA accuracy", "n/a" if report.evqa_accuracy is None else f"{report.evqa_accuracy:.3f}")

        df = pd.DataFrame([to_jsonable(c) for c in report.cases])
        st.dataframe(df, width='stretch')
        st.download_button("Download per-case CSV 📊", df.to_csv(index=False).encode('utf-8-sig'),
                           file_name="evaluation.csv", mime="text/csv")
