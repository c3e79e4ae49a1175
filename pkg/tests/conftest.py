import os
import time
from pathlib import Path

import numpy as np
import pytest

from fclmia.contrastive import EncoderConfig
from fclmia.datasets import DatasetSpec, load_pool

TINY_ARCH = EncoderConfig(channels=(4, 8), strides=(1, 2), dim=8, groups=2)


@pytest.fixture
def tiny_arch():
    return TINY_ARCH


@pytest.fixture(scope="session")
def tiny_pools():
    return load_pool(DatasetSpec(n_train=32, n_holdout=32, image_size=8, grid=4, latent_dim=8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """The standard desk run, trained once per session.

    Set FCLMIA_DESK_RUN to reuse an existing run directory.
    """
    from fclmia import runs
    from fclmia.config import desk_config

    cfg = desk_config()
    existing = os.environ.get("FCLMIA_DESK_RUN")
    run_dir = Path(existing) if existing else tmp_path_factory.mktemp("desk") / "run"
    t0 = time.perf_counter()
    runs.train(cfg, run_dir)
    elapsed = time.perf_counter() - t0
    _, exp = runs.load_run(run_dir)
    return {"cfg": cfg, "dir": run_dir, "exp": exp, "train_seconds": elapsed}


_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """``record(n, ok, detail)`` stores one result line per criterion."""

    def record(n, ok, detail):
        _ACCEPTANCE[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[n])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
