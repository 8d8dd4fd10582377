import numpy as np
import pytest
import torch

from handhygiene.model import BackboneSpec, HeadSpec, attach_head, freeze_backbone, load_backbone, make_surrogate_weights
from handhygiene.prep import PreprocessConfig

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def weights(tmp_path_factory):
    path = tmp_path_factory.mktemp("weights") / "resnet50-surrogate.pt"
    sha = make_surrogate_weights(path, seed=0)
    return path, sha


@pytest.fixture(scope="session")
def backbone_spec(weights):
    path, sha = weights
    return BackboneSpec(weights_path=str(path), weights_sha256=sha)


@pytest.fixture
def make_model(backbone_spec):
    """Factory for a fresh frozen classifier on the surrogate backbone."""

    def factory(num_classes=3, seed=0, class_order=None, **head_kwargs):
        backbone = load_backbone(backbone_spec)
        model = freeze_backbone(attach_head(backbone, HeadSpec(num_classes=num_classes, seed=seed, **head_kwargs), backbone_spec))
        model.preprocess = PreprocessConfig()
        model.class_order = class_order
        return model

    return factory


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_batch(rng):
    def make(n):
        return rng.normal(0, 50, (n, 224, 224, 3)).astype(np.float32)

    return make


# -- acceptance summary -------------------------------------------------------

_criteria: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "ran": False, "detail": []})
    if rep.failed:
        entry["ok"] = False
    if rep.when == "call":
        entry["ran"] = True
        entry["detail"] += [str(v) for k, v in item.user_properties if k == "measured"]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        c = _criteria[number]
        verdict = "PASS" if c["ok"] and c["ran"] else "FAIL"
        detail = f"  [{'; '.join(c['detail'])}]" if c["detail"] else ""
        terminalreporter.write_line(f"{verdict}  {number}. {c['title']}{detail}")
