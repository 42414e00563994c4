"""Top-level `scripts` package: the CUE-M engine lives in `scripts.backend.cuem`.

No submodules are imported here; import them where they are used
(e.g. `from scripts.backend.cuem.pipeline import run_pipeline`).
"""
