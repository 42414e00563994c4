import pytest

from scripts.backend.cuem.config import DEFAULT_FIXTURES_DIR, Settings, load_settings, settings_from_dict
from scripts.backend.cuem.errors import ConfigError


def test_defaults_run_on_the_bundled_fixtures(monkeypatch):
    monkeypatch.delenv("CUEM_CONFIG", raising=False)
    settings = load_settings()
    assert settings.backend_mode == "mock"
    assert settings.fixtures_dir == DEFAULT_FIXTURES_DIR
    assert settings.pipeline.k_top_docs == 5


def test_toml_file(tmp_path):
    path = tmp_path / "cuem.toml"
    path.write_text(
        "[pipeline]\nk_top_docs = 3\nrelevance_query = \"search_query\"\n\n"
        "[paths]\ntrace_store = \"out/traces.jsonl\"\n\n"
        "[search]\ndomain_filter = \"wiki\"\n\n"
        "[service]\nport = 9100\n\n"
        "[logging]\nlevel = \"debug\"\n",
        encoding="utf-8",
    )
    settings = load_settings(path)
    assert settings.pipeline.k_top_docs == 3
    assert settings.pipeline.relevance_query == "search_query"
    assert settings.trace_store == tmp_path / "out" / "traces.jsonl"
    assert settings.domain_filter == "wiki"
    assert settings.port == 9100
    assert settings.log_level == "DEBUG"
    assert settings.source == path.resolve()


def test_env_var_names_the_config(tmp_path, monkeypatch):
    path = tmp_path / "env.toml"
    path.write_text("[pipeline]\nmax_supplementary_queries = 1\n", encoding="utf-8")
    monkeypatch.setenv("CUEM_CONFIG", str(path))
    assert load_settings().pipeline.max_supplementary_queries == 1


def test_empty_domain_filter_means_none(tmp_path):
    assert settings_from_dict({"search": {"domain_filter": ""}}, tmp_path).domain_filter is None


@pytest.mark.parametrize("raw", [
    {"pipeline": {"k_top": 3}},
    {"pipeline": {"k_top_docs": 0}},
    {"pipeline": {"relevance_query": "caption"}},
    {"backends": {"mode": "grpc"}},
    {"backends": {"mode": "http"}},
    {"paths": {"cache": "x"}},
    {"service": {"port": "eighty"}},
])
def test_invalid_config_is_rejected(raw, tmp_path):
    with pytest.raises(ConfigError):
        settings_from_dict(raw, tmp_path)


def test_missing_or_broken_files(tmp_path):
    with pytest.raises(ConfigError):
        load_settings(tmp_path / "absent.toml")
    broken = tmp_path / "broken.toml"
    broken.write_text("[pipeline\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_settings(broken)


def test_http_mode_keeps_endpoints(tmp_path):
    settings = settings_from_dict({"backends": {"mode": "http", "endpoints": {"default": "http://models"}}}, tmp_path)
    assert isinstance(settings, Settings)
    assert settings.endpoints == {"default": "http://models"}
