import numpy as np

from angular_at import autodiff as ad
from angular_at import selfcheck
from angular_at.cli import main


def test_instances_cover_every_shape():
    shapes = [(K, d) for K, d, _ in selfcheck.instances(9)]
    assert sorted(shapes) == sorted(selfcheck.SHAPES)


def test_instances_deterministic():
    a = [rng.normal() for _, _, rng in selfcheck.instances(4, seed=3)]
    b = [rng.normal() for _, _, rng in selfcheck.instances(4, seed=3)]
    assert a == b


def test_suite_passes():
    results = selfcheck.run_all(n=3)
    assert all(r.passed for r in results), results
    assert [r.name for r in results] == ["grad.margin_ce", "grad.wfc", "grad.sep", "grad.objective",
                                         "format.tensor_roundtrip", "format.checkpoint_roundtrip"]


def test_sign_bug_in_wfc_backward_is_caught(monkeypatch):
    original = ad._arccos_grad
    monkeypatch.setattr(ad, "_arccos_grad", lambda x: -original(x))
    results = {r.name: r for r in selfcheck.gradient_suite(n=2)}
    assert not results["grad.wfc"].passed
    assert not results["grad.objective"].passed
    assert results["grad.margin_ce"].passed and results["grad.sep"].passed
    assert main(["selfcheck", "--instances", "2"]) == 4


def test_broken_serializer_is_integrity_failure(monkeypatch):
    def lossy_save(path, array):
        from angular_at.data import encode_tensor

        a = np.asarray(array, dtype=np.float64)
        with open(path, "wb") as fh:
            fh.write(encode_tensor(a.astype(np.float32).astype(np.float64)))

    monkeypatch.setattr(selfcheck, "save_tensor", lossy_save)
    assert not [r for r in selfcheck.format_suite() if r.name == "format.tensor_roundtrip"][0].passed
    assert main(["selfcheck", "--instances", "1"]) == 5
