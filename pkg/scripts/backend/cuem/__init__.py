"""CUE-M multimodal RAG engine: stages, backends and evaluation harness.

Import submodules explicitly where they are needed
(e.g. `from scripts.backend.cuem import pipeline`).
"""
