"""Versioned prompt templates loaded from `<name>.v<N>.txt` files."""
import logging
import re
from pathlib import Path

from .errors import TemplateError

logger = logging.getLogger(__name__)

DEFAULT_TEMPLATES_DIR = Path(__file__).resolve().parent / "templates"

_FILE_RE = re.compile(r"^(?P<name>[A-Za-z0-9_]+)\.v(?P<version>\d+)\.txt$")
# Only bare identifiers are placeholders, so forced JSON prefixes like {"need_api": pass through.
_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")


def fill(text, values):
    def _sub(m):
        key = m.group(1)
        if key not in values:
            raise TemplateError(f"missing value for placeholder {{{key}}}")
        value = values[key]
        return "" if value is None else str(value)

    return _PLACEHOLDER_RE.sub(_sub, text)


class TemplateLibrary:
    def __init__(self, root=None):
        self.root = Path(root) if root else DEFAULT_TEMPLATES_DIR
        if not self.root.is_dir():
            raise TemplateError(f"templates directory not found: {self.root}")
        self._versions = {}
        for path in self.root.iterdir():
            m = _FILE_RE.match(path.name)
            if m:
                self._versions.setdefault(m.group("name"), {})[int(m.group("version"))] = path
        self._cache = {}

    def latest_version(self, name):
        try:
            return max(self._versions[name])
        except KeyError:
            raise TemplateError(f"unknown template {name!r} in {self.root}") from None

    def text(self, name, version=None):
        version = self.latest_version(name) if version is None else version
        key = (name, version)
        if key not in self._cache:
            try:
                path = self._versions[name][version]
            except KeyError:
                raise TemplateError(f"template {name!r} has no version {version}") from None
            self._cache[key] = path.read_text(encoding="utf-8")
        return self._cache[key]

    def render(self, name, version=None, **values):
        return fill(self.text(name, version), values)

    def few_shots(self, name):
        path = self.root / "few_shots" / f"{name}.txt"
        if not path.exists():
            return ""
        return path.read_text(encoding="utf-8").strip()
