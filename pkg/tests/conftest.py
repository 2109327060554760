import shutil
import subprocess
from pathlib import Path

import pytest

from forkaware.tracer_os import tracing_supported

REPO_ROOT = Path(__file__).resolve().parents[1]
CHALLENGES_DIR = REPO_ROOT / "challenges"


def require_tracing():
    ok, reason = tracing_supported()
    if not ok:
        pytest.skip(f"real tracing unavailable: {reason}")


def require_cc():
    if shutil.which("cc") is None:
        pytest.skip("no C compiler on this host")


@pytest.fixture(scope="session")
def cc_build(tmp_path_factory):
    """Compile a tiny C source into a session-cached binary."""
    require_cc()
    build_dir = tmp_path_factory.mktemp("targets")
    cache: dict[str, Path] = {}

    def build(name: str, source: str) -> Path:
        if name in cache:
            return cache[name]
        src = build_dir / f"{name}.c"
        src.write_text(source)
        binary = build_dir / name
        subprocess.run(
            ["cc", "-O1", "-Wall", "-o", str(binary), str(src)],
            check=True,
            capture_output=True,
        )
        cache[name] = binary
        return binary

    return build


@pytest.fixture(scope="session")
def challenges_dir() -> Path:
    if not (CHALLENGES_DIR / "genchallenge.c").is_file():
        pytest.skip("challenge generator package not present")
    return CHALLENGES_DIR
