from __future__ import annotations

import ast
import re
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]

# import name -> distribution name, where they differ
DISTRIBUTIONS = {"PIL": "Pillow", "dotenv": "python-dotenv", "requests_cache": "requests-cache"}


def imported_modules(path: Path) -> set[str]:
    names = set()
    for node in ast.walk(ast.parse(path.read_text(encoding="utf-8"))):
        if isinstance(node, ast.Import):
            names.update(alias.name.split(".")[0] for alias in node.names)
        elif isinstance(node, ast.ImportFrom) and node.level == 0 and node.module:
            names.add(node.module.split(".")[0])
    return names


def requirement_names() -> set[str]:
    lines = (ROOT / "requirements.txt").read_text(encoding="utf-8").splitlines()
    return {re.split(r"[<>=!~\[ ]", line.strip(), maxsplit=1)[0].lower() for line in lines if line.strip()}


def test_every_third_party_import_is_a_listed_requirement():
    modules = set()
    for path in [ROOT / "main.py", *sorted((ROOT / "src").glob("*.py"))]:
        modules |= imported_modules(path)
    third_party = {m for m in modules if m not in sys.stdlib_module_names and m not in {"src", "__future__"}}

    assert "urllib3" in third_party
    missing = {m for m in third_party if DISTRIBUTIONS.get(m, m).lower() not in requirement_names()}
    assert missing == set()
