import json
import os
import sys

import pytest

# Add project root to path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '../..')))

from scripts.backend.cuem.api_select import ApiRegistry
from scripts.backend.cuem.config import DEFAULT_FIXTURES_DIR, Settings
from scripts.backend.cuem.enrichment import load_interaction_log
from scripts.backend.cuem.models import PipelineConfig
from scripts.backend.cuem.pipeline import Registries
from scripts.backend.cuem.runtime import ImageStore, build_runtime, load_fixture_backends
from scripts.backend.cuem.safety import InstanceDatabase, make_entry
from scripts.backend.cuem.templates import TemplateLibrary
from scripts.backend.cuem.utils import read_jsonl

FIXTURES = DEFAULT_FIXTURES_DIR


@pytest.fixture
def cfg():
    return PipelineConfig(backend_deadline_s=None)


@pytest.fixture
def templates():
    return TemplateLibrary()


@pytest.fixture
def registry():
    return ApiRegistry.load(FIXTURES / "apis.json")


@pytest.fixture
def backends(registry):
    return load_fixture_backends(FIXTURES, registry)


@pytest.fixture
def images():
    return ImageStore.load(FIXTURES / "images.json")


@pytest.fixture
def interactions():
    return tuple(load_interaction_log(FIXTURES / "interactions.jsonl"))


@pytest.fixture
def instance_db(backends):
    seeds = json.loads((FIXTURES / "safety.json").read_text())["instances"]
    return InstanceDatabase(make_entry(s["id"], s["query_text"], s["canned_response"], backends) for s in seeds)


@pytest.fixture
def registries(templates, registry, instance_db, interactions):
    return Registries(templates=templates, apis=registry, instance_db=instance_db, interaction_log=interactions)


@pytest.fixture
def settings(tmp_path):
    return Settings(
        pipeline=PipelineConfig(),
        instance_db=tmp_path / "instance_db.jsonl",
        trace_store=tmp_path / "traces.jsonl",
    )


@pytest.fixture
def fixture_runtime(settings):
    return build_runtime(settings)


@pytest.fixture
def evqa_samples():
    return read_jsonl(FIXTURES / "evqa_samples.jsonl")
