import numpy as np
import pytest

from xfuse.config import RunConfig


def tiny_config(**kw) -> RunConfig:
    """Smallest valid model: 32x32 input, two one-block stages of width 8/16."""
    base = dict(
        size=32,
        embed_dim=8,
        depths=(1, 1),
        heads=(2, 2),
        decoder_widths=(8, 6, 4),
        seg_samples=40,
        cls_samples=60,
        cls_splits=(0.5, 0.25, 0.25),
        seg_epochs=1,
        cls_epochs=1,
        batch_size=8,
    )
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture
def tiny_cfg() -> RunConfig:
    return tiny_config()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance report

_ACCEPTANCE: list[tuple[int, bool | None, str]] = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, ok, detail)``; ``ok=None`` means skipped."""

    def record(n: int, ok: bool | None, detail: str) -> None:
        _ACCEPTANCE.append((n, ok, detail))
        print(f"criterion {n}: {'SKIP' if ok is None else 'PASS' if ok else 'FAIL'} {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {n}: {detail}")
