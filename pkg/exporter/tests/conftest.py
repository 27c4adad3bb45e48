from __future__ import annotations

from pathlib import Path

import pytest

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def sample_text() -> str:
    return (DATA / "sample.txt").read_text(encoding="utf-8")


@pytest.fixture(scope="session")
def exported_trace(tmp_path_factory, sample_text):
    """One natural-text export with the seeded built-in model, shared
    across tests (the forward pass is the slow part)."""
    from kvtr_exporter import ExportSpec, export_trace

    out = tmp_path_factory.mktemp("export") / "sample.kvtr"
    spec = ExportSpec(
        model="tiny-random-llama:0",
        text=sample_text,
        out=str(out),
        max_seq_len=512,
        first_layer=1,
    )
    summary = export_trace(spec)
    return out, summary
