import numpy as np
import pytest

from lapa import tensor as T
from lapa.config import ConfigError, ModelConfig
from lapa.data import SyntheticSpec, generate
from lapa.model import CheckpointError, LaPA
from lapa.tensor import Tensor
from lapa.train import build_model, check_tiny, train

SMALL = dict(d=8, heads=2, n_blocks=1, prompt_size=4, gat_heads=2, image_size=8, patch=4, max_len=8,
             batch_size=4, epochs=2, encoder_layers=1)


@pytest.fixture(scope="module")
def data():
    d = generate(SyntheticSpec(n_train=12, n_val=6, n_test=6, image_size=8, seed=5))
    return {"train": d.train, "val": d.val, "test": d.test, "vocab": d.vocab, "graph": d.graph}


def model_for(data, **kw):
    return build_model(ModelConfig(**{**SMALL, **kw}), data)


def test_forward_shapes(data):
    m = model_for(data)
    out = m.forward(m.make_batch(data["train"][:3]))
    assert out.logits.shape == (3, len(data["vocab"]))
    assert out.integrated.shape == (3, 4 + len(data["graph"]), 8)
    assert np.isfinite(out.loss.item()) and out.cs is not None


def test_every_group_gets_gradient(data):
    m = model_for(data)
    m.zero_grad()
    m.forward(m.make_batch(data["train"][:4])).loss.backward()
    norms = {}
    for name, p in m.parameters().items():
        group = m.group_of(name)
        norms[group] = norms.get(group, 0.0) + float(np.sum(p.grad**2))
    assert set(norms) == {"prompt", "generation", "encoders", "fusion", "knowledge", "head"}
    assert all(v > 0 for v in norms.values()), norms
    first_block = sum(float(np.sum(p.grad**2)) for n, p in m.parameters().items() if n.startswith("fusion.0."))
    assert first_block > 0


def test_toggles_change_parameter_count(data):
    counts = [
        model_for(data, gm=False, cs=False, lf=False, pf=False, alpha=0.0).n_parameters(),
        model_for(data, cs=False, pf=False).n_parameters(),
        model_for(data, pf=False).n_parameters(),
        model_for(data).n_parameters(),
    ]
    assert counts[0] < counts[1] == counts[2] < counts[3]


def test_baseline_runs_without_prompt(data):
    m = model_for(data, gm=False, cs=False, lf=False, pf=False, alpha=0.0)
    out = m.forward(m.make_batch(data["train"][:2]))
    assert out.integrated is None and out.cs is None and out.prompt is None


def test_prior_kv_generated_variant(data):
    raw = model_for(data)
    gen = model_for(data, prior_kv="generated")
    batch = raw.make_batch(data["train"][:2])
    assert not np.array_equal(raw.forward(batch).logits.data, gen.forward(batch).logits.data)


def shifted(t, rng):
    return Tensor(t.data + rng.normal(size=t.shape))


def test_isolation_of_combination_terms(data, monkeypatch, rng):
    import dataclasses

    import lapa.model as M

    batch = None
    for weights, target in [(dict(theta=0.0, beta=0.0), "cross"), (dict(alpha=0.0), "integrated")]:
        m = model_for(data, **weights)
        batch = m.make_batch(data["train"][:3])
        before = m.forward(batch).logits.data.copy()
        with monkeypatch.context() as mp:
            if target == "cross":
                run_stack = M.run_stack

                def noisy_stack(*a, **k):
                    out = run_stack(*a, **k)
                    return dataclasses.replace(out, image_cross=shifted(out.image_cross, rng), text_cross=shifted(out.text_cross, rng))

                mp.setattr(M, "run_stack", noisy_stack)
            else:
                prior_fuse = M.prior_fuse
                mp.setattr(M, "prior_fuse", lambda *a, **k: shifted(prior_fuse(*a, **k), rng))
            after = m.forward(batch).logits.data
        np.testing.assert_array_equal(before, after)


def test_checkpoint_round_trip(data, tmp_path):
    m, report = train(ModelConfig(**SMALL), data)
    m.save(tmp_path / "ck.npz")
    loaded = LaPA.load(tmp_path / "ck.npz", expected_config=m.config)
    for split in ("train", "val", "test"):
        assert loaded.evaluate(data[split]) == m.evaluate(data[split])
    batch = m.make_batch(data["val"])
    np.testing.assert_array_equal(loaded.forward(batch).logits.data, m.forward(batch).logits.data)


def test_checkpoint_errors(data, tmp_path):
    m = model_for(data)
    m.save(tmp_path / "ck.npz")
    with pytest.raises(CheckpointError, match="config hash"):
        LaPA.load(tmp_path / "ck.npz", expected_config=m.config.replace(eta=0.5))
    raw = (tmp_path / "ck.npz").read_bytes()
    (tmp_path / "bad.npz").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        LaPA.load(tmp_path / "bad.npz")
    (tmp_path / "junk.npz").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        LaPA.load(tmp_path / "junk.npz")


def test_training_is_deterministic_and_learns(data):
    cfg = ModelConfig(**{**SMALL, "epochs": 4})
    _, a = train(cfg, data)
    _, b = train(cfg, data)
    assert a.losses == b.losses
    assert a.losses[-1] < a.losses[0]
    assert all(np.isfinite(e.loss) and np.isfinite(e.bce) for e in a.epochs)


def test_unknown_answer_and_oversized_question(data):
    m = model_for(data)
    with pytest.raises(ValueError):
        m.answer_id("maybe")
    with pytest.raises(ConfigError):
        train(ModelConfig(**{**SMALL, "image_size": 16}), data)


def test_tiny_limits():
    with pytest.raises(ConfigError):
        check_tiny(ModelConfig(), 2)
    with pytest.raises(ConfigError):
        check_tiny(ModelConfig.tiny(), 3)
    check_tiny(ModelConfig.tiny(), 2)
