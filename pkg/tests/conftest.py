import logging
import os
from pathlib import Path

import pytest
import torch

from conceptfuse.pipeline.config import RunConfig
from conceptfuse.testbed.pretrain import load_or_build_base

CACHE = Path(os.environ.get("CONCEPTFUSE_TEST_CACHE", Path(__file__).resolve().parent.parent / ".cache"))
BASE_CFG = RunConfig()

logging.getLogger("conceptfuse.concepts").setLevel(logging.ERROR)


@pytest.fixture(scope="session")
def base():
    """Pretrained testbed base model, cached across sessions."""
    return load_or_build_base(BASE_CFG.base_seed, BASE_CFG.base_steps, CACHE)


@pytest.fixture(scope="session")
def raw_base():
    from conceptfuse.testbed.model import build_testbed
    return build_testbed(0)


@pytest.fixture(scope="session")
def trained(base):
    """Default-config single-concept runs for the two builtin concepts used in multi-concept tests."""
    from conceptfuse.pipeline.train import train_single
    from conceptfuse.testbed.data import BUILTIN_CONCEPTS, make_dataset
    return {name: train_single(RunConfig(), make_dataset(BUILTIN_CONCEPTS[name], 0), base)
            for name in ("dogA", "clockB")}


@pytest.fixture(scope="session")
def fused(base, trained):
    from conceptfuse.pipeline.fuse import fuse_model
    return fuse_model([trained["dogA"].checkpoint, trained["clockB"].checkpoint], base)


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(0)


# ---- acceptance reporting --------------------------------------------------------------------

ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        rows = ACCEPTANCE[cid]
        ok = all(r[1] for r in rows)
        failed = [detail for _, passed, detail in rows if not passed]
        summary = "; ".join(d for _, _, d in rows) if ok else "; ".join(failed)
        terminalreporter.write_line(f"criterion {cid}: {'PASS' if ok else 'FAIL'} "
                                    f"({sum(r[1] for r in rows)}/{len(rows)} checks) {summary}")
