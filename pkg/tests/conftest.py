import json
import os
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from recurvsr import adversarial as A  # noqa: E402
from recurvsr import data as D  # noqa: E402
from recurvsr.trainer import WindowDataset  # noqa: E402

# Shared desk-scale workload: 16 training and 4 held-out clips of 16 frames, 128x128 HR / 32x32 LR.
# Coarse textures and slow motion keep the content learnable at 32x32 LR, so
# per-frame degradation noise (flicker) dominates the temporal error.
TRAIN_CLIPS, HELD_CLIPS = 16, 4
WORKLOAD_SAMPLER = D.SceneSampler(texture_scale=2.5, max_speed=4.0)
PRIOR_AE_STEPS, PRIOR_DEN_STEPS = 4000, 1000


def _cache_root(tmp_path_factory):
    # RECURVSR_TEST_CACHE lets repeated local runs reuse the generated data and prior.
    env = os.environ.get("RECURVSR_TEST_CACHE")
    if env:
        root = Path(env)
        root.mkdir(parents=True, exist_ok=True)
        return root
    return tmp_path_factory.mktemp("workload")


@pytest.fixture(scope="session")
def workload(tmp_path_factory):
    root = _cache_root(tmp_path_factory)
    stamp = json.dumps({"sampler": asdict(WORKLOAD_SAMPLER), "clips": [TRAIN_CLIPS, HELD_CLIPS],
                        "prior": [PRIOR_AE_STEPS, PRIOR_DEN_STEPS]}, sort_keys=True)
    if not (root / "workload.json").exists() or (root / "workload.json").read_text() != stamp:
        for sub in ("train", "held", "prior"):
            shutil.rmtree(root / sub, ignore_errors=True)
        D.generate_dataset(root / "train", TRAIN_CLIPS, 0, sampler=WORKLOAD_SAMPLER)
        D.generate_dataset(root / "held", HELD_CLIPS, 1, sampler=WORKLOAD_SAMPLER)
        (root / "workload.json").write_text(stamp)
    return root


@pytest.fixture(scope="session")
def latent_prior(workload):
    prior_dir = workload / "prior"
    if not (prior_dir / "metadata.json").exists():
        frames = WindowDataset.from_dirs([workload / "train"], 7, 4, 2).hr_frames()
        ae, am = A.pretrain_latent_encoder(frames, steps=PRIOR_AE_STEPS, seed=0)
        den, dm = A.pretrain_denoiser(ae, frames, steps=PRIOR_DEN_STEPS, seed=0)
        A.save_latent_prior(prior_dir, ae, den, A.prior_metadata(am, dm))
    ae, den, meta = A.load_latent_prior(prior_dir)
    return ae, den, meta


@pytest.fixture(scope="session")
def latent_prior_dir(workload, latent_prior):
    return workload / "prior"


# -- acceptance summary ------------------------------------------------------------

_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    name = item.name
    if not name.startswith("test_criterion_"):
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        _ACCEPTANCE[name] = "PASS" if rep.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        label = name[len("test_criterion_"):]
        terminalreporter.write_line(f"criterion {label}: {_ACCEPTANCE[name]}")
