import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from taskmoe.checkpoint import CheckpointError, load_checkpoint, pack_tensors, unpack_tensors
from taskmoe.corpus import DataError
from taskmoe.estimator import TaskMoE, check_tasks
from taskmoe.transformer import ConfigError

TINY = dict(n_layers=2, d_model=16, n_heads=2, d_ff=32, n_experts=3, total_steps=4,
            validate_every=2, batch_size=4, pretrain_steps=2)


@pytest.fixture(scope="module")
def fitted(small_tasks, vocab):
    return TaskMoE(stage="two", **TINY).fit(small_tasks, vocab=vocab)


def test_params_and_clone():
    est = TaskMoE(n_experts=2, baseline="average")
    assert est.get_params()["n_experts"] == 2
    c = clone(est)
    assert c.get_params() == est.get_params() and c is not est
    est.set_params(stage="two")
    assert est.train_config().stage == "two"
    assert est.train_config().task_repr_lr == 1e-2
    assert TaskMoE(representation="fisher").train_config().task_repr_lr == 1e-3
    assert TaskMoE(task_repr_lr=0.5).train_config().task_repr_lr == 0.5


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        TaskMoE().predict([("a", "b")])


def test_check_tasks(small_tasks):
    with pytest.raises(DataError):
        check_tasks([])
    with pytest.raises(DataError):
        check_tasks([small_tasks[0], small_tasks[0]])
    with pytest.raises(TypeError):
        check_tasks(["parity_0"])


def test_two_stage_with_baseline_rejected(small_tasks):
    with pytest.raises(ConfigError):
        TaskMoE(stage="two", baseline="average", **TINY).fit(small_tasks)


def test_fit_predict_score(fitted, small_tasks):
    assert len(fitted.history_) == 2
    t = small_tasks[0]
    preds = fitted.predict([(t.name, x) for x, _ in t.test[:3]] + [(small_tasks[1].name, "a b")])
    assert len(preds) == 4 and all(isinstance(p, str) for p in preds)
    s = fitted.score(small_tasks)
    assert 0 <= s <= 1
    R = fitted.routes()
    assert R.shape == (3, 2, 3) and np.all(R.sum(-1) == 1)
    with pytest.raises(KeyError):
        fitted.predict([("nope", "a")])


def test_baseline_fit(small_tasks, vocab):
    est = TaskMoE(baseline="average", **TINY).fit(small_tasks, vocab=vocab)
    assert est.pipeline_ is None
    assert np.allclose(est.routes(), 1 / 3)


def test_save_load_round_trip(fitted, small_tasks, tmp_path):
    path = tmp_path / "m.ckpt"
    fitted.save(path, extra_tasks=[], rng={"seed": 0})
    back = TaskMoE.load(path)
    assert back.get_params() == fitted.get_params()
    a, b = fitted.model_.state_dict(), back.model_.state_dict()
    assert set(a) == set(b) and all(np.array_equal(a[k], b[k]) for k in a)
    X = [(t.name, x) for t in small_tasks for x, _ in t.test[:2]]
    assert back.predict(X) == fitted.predict(X)
    assert np.array_equal(back.routes(), fitted.routes())
    assert len(back.route_log_) == len(fitted.route_log_)
    assert back.pipeline_.scale == fitted.pipeline_.scale


def test_save_is_byte_stable(fitted, tmp_path):
    fitted.save(tmp_path / "a.ckpt")
    fitted.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_tensor_blob_round_trip():
    rng = np.random.default_rng(0)
    t = {"b": rng.normal(size=(2, 3)), "a": np.array(1.5), "c": np.zeros((0, 4))}
    back = unpack_tensors(pack_tensors(t))
    assert set(back) == set(t)
    assert all(np.array_equal(back[k], t[k]) and back[k].shape == t[k].shape for k in t)
    with pytest.raises(CheckpointError):
        unpack_tensors(pack_tensors(t)[:-3])


def test_bad_checkpoint(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
