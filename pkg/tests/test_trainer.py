import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from semimatch import losses, trainer
from semimatch.numerics import Tensor, grad
from semimatch.trainer import RunConfig


def tiny_config(**kw):
    base = dict(
        epochs=2,
        warmup=0.5,
        batch_size=5,
        n_train=10,
        n_val=4,
        n_test=4,
        label_fraction=0.3,
        channels="4,6",
        strides="4,2",
        agg_hidden=2,
        dtype="float64",
        min_mean_m=0.0,
    )
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def dataset():
    return trainer.load_dataset(tiny_config())


def batch_for(cfg, dataset, epoch=0):
    lab, unl = trainer.split_train(dataset["train"], cfg)
    li, ui = trainer.make_batches(len(lab), len(unl), cfg.batch_size, cfg.seed, epoch)[0]
    return trainer.build_batch(lab, unl, li, ui, cfg, epoch)


def params_equal(a, b):
    return all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


def test_config_validation_and_coercion():
    with pytest.raises(ValueError):
        RunConfig(warmup=1.5)
    with pytest.raises(ValueError):
        RunConfig(occlusion="mixup")
    assert RunConfig.coerce("use_fb", "off") is False
    assert RunConfig.coerce("lr", "1e-3") == 1e-3
    with pytest.raises(KeyError):
        RunConfig.coerce("nope", "1")
    with pytest.raises(ValueError):
        RunConfig.coerce("epochs", "two")
    assert RunConfig(epochs=12, warmup=0.2).warmup_epochs == 2


def test_config_file_round_trip(tmp_path):
    cfg = tiny_config(tag="x", use_thres=False)
    path = trainer.write_config_file(tmp_path / "c.txt", cfg)
    assert RunConfig(**trainer.read_config_file(path)) == cfg
    bad = tmp_path / "bad.txt"
    bad.write_text("epochs = 3\nthis line is wrong\n")
    with pytest.raises(ValueError, match=":2:"):
        trainer.read_config_file(bad)


def test_config_hash_ignores_output_location():
    a = tiny_config(output_dir="a", tag="t")
    assert a.config_hash() == tiny_config(output_dir="b").config_hash()
    assert a.config_hash() != tiny_config(seed=1).config_hash()


@given(nl=st.integers(0, 40), nu=st.integers(0, 200), bs=st.integers(1, 30), seed=st.integers(0, 99))
def test_batches_partition_both_sets(nl, nu, bs, seed):
    batches = trainer.make_batches(nl, nu, bs, seed, 0)
    if nl + nu == 0:
        assert batches == []
        return
    lab = np.concatenate([b[0] for b in batches])
    unl = np.concatenate([b[1] for b in batches])
    assert sorted(lab) == list(range(nl)) and sorted(unl) == list(range(nu))
    sizes = [len(b[0]) for b in batches]
    # labeled pairs are spread as evenly as possible
    assert max(sizes) - min(sizes) <= 1
    assert all(len(a) + len(b) <= bs + 2 for a, b in batches)
    again = trainer.make_batches(nl, nu, bs, seed, 0)
    assert all(np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1]) for x, y in zip(batches, again))


def test_adam_first_step_moves_by_lr():
    opt = trainer.Adam(lr=0.1)
    new = opt.step({"w": np.array([1.0, -2.0, 0.5])}, {"w": np.array([3.0, -0.2, 0.0])})
    np.testing.assert_allclose(new["w"], [0.9, -1.9, 0.5], atol=1e-6)
    other = trainer.Adam(lr=0.1)
    other.load(opt.state())
    assert other.t == 1 and np.array_equal(other.m["w"], opt.m["w"])


def test_sgd_momentum():
    opt = trainer.SGD(lr=0.5, momentum=0.9)
    p = {"w": np.array([0.0])}
    p = opt.step(p, {"w": np.array([1.0])})
    p = opt.step(p, {"w": np.array([1.0])})
    np.testing.assert_allclose(p["w"], [-0.5 - 0.5 * 1.9])


def test_unlabeled_pairs_never_reach_the_supervised_loss(dataset):
    cfg = tiny_config(warmup=0.0)
    batch = batch_for(cfg, dataset)
    assert 0 < batch.n_labeled < batch.size
    assert all(t.source_keypoints is None for t in batch.triplets[batch.n_labeled :])
    b_idx, _, _ = trainer.supervision(batch, (64, 64), (8, 8))
    assert b_idx.max() < batch.n_labeled
    model = trainer.MatchingModel(cfg.model_config(), seed=0)
    ref = trainer.compute_losses(model, batch, cfg, 0, True)["l_sup"]
    # scrambling every unlabeled image leaves L_sup untouched
    for t in batch.triplets[batch.n_labeled :]:
        t.source[:] = np.random.default_rng(0).random(t.source.shape)
        t.weak[:] = 0.0
        t.strong[:] = 1.0
    out = trainer.compute_losses(model, batch, cfg, 0, True)["l_sup"]
    assert float(out.data) == float(ref.data)


def test_weak_branch_sends_no_gradient(dataset):
    # an untrained model is never confident, so keep only the foreground prior
    cfg = tiny_config(warmup=0.0, use_fb=False, use_thres=False)
    batch = batch_for(cfg, dataset)
    model = trainer.MatchingModel(cfg.model_config(), seed=0)
    model.params["agg.conv2.weight"] = Tensor(np.full((1, 2, 1, 1), 0.3), requires_grad=True, name="agg.conv2.weight")
    out = trainer.compute_losses(model, batch, cfg, 0, True)
    assert not out["unsup_flag"]
    names = list(model.params)
    got = grad(out["l_unsup"], [model.params[n] for n in names])
    # rebuild the loss with pseudo-labels and weights frozen as constants
    src = np.stack([t.source for t in batch.triplets])
    strong = np.stack([t.strong for t in batch.triplets])
    res = model.forward(src, strong)
    ref, _ = losses.contrastive_unsup_loss(model.unit_scores(res), out["targets"], out["m"], cfg.gamma)
    want = grad(ref, [model.params[n] for n in names])
    np.testing.assert_allclose(float(ref.data), float(out["l_unsup"].data), rtol=1e-12)
    for n, a, b in zip(names, got, want):
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12, err_msg=n)


def test_confidence_invariants_on_a_batch(dataset):
    cfg = tiny_config(warmup=0.0)
    model = trainer.MatchingModel(cfg.model_config(), seed=0)
    out = trainer.compute_losses(model, batch_for(cfg, dataset), cfg, 0, True)
    np.testing.assert_allclose(out["p_weak"].sum(-1), 1.0, atol=1e-6)
    assert np.all((out["m"] >= 0) & (out["m"] <= 1))
    for cm in out["masks"]:
        assert set(np.unique(cm.fb)) <= {0.0, 1.0}
        assert np.all(cm.thres <= 1.0)


def test_warmup_only_run_equals_supervised(dataset):
    a = trainer.run_training(tiny_config(warmup=1.0, n_test=0), dataset={"train": dataset["train"]})
    b = trainer.run_training(tiny_config(warmup=1.0, mode="supervised", n_test=0), dataset={"train": dataset["train"]})
    assert params_equal(a.model, b.model)
    assert all(r["n_unlabeled"] == 0 for r in a.log_rows)


def test_supervised_step_without_labels_is_skipped(dataset):
    cfg = tiny_config(mode="supervised")
    lab, unl = trainer.split_train(dataset["train"], cfg)
    batch = trainer.build_batch(lab, unl, np.array([], int), np.arange(3), cfg, 0)
    model = trainer.MatchingModel(cfg.model_config(), seed=0)
    before = model.state_dict()
    res = trainer.train_step(model, trainer.make_optimizer(cfg), batch, cfg, 0)
    assert not res.applied
    assert all(np.array_equal(before[k], model.params[k].data) for k in before)


def test_rejected_steps_halt_training(dataset, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise FloatingPointError("non-finite loss")

    monkeypatch.setattr(trainer, "train_step", boom)
    cfg = tiny_config(output_dir=str(tmp_path), max_rejections=2)
    with pytest.raises(trainer.TrainingHalted):
        trainer.run_training(cfg, dataset=dataset)
    assert sorted(p.name for p in tmp_path.glob("rejected_step*.smt")) == ["rejected_step0.smt", "rejected_step1.smt"]


def test_resume_matches_uninterrupted_run(dataset, tmp_path):
    full = trainer.run_training(tiny_config(output_dir=str(tmp_path / "full")), dataset=dataset)
    trainer.run_training(tiny_config(epochs=1, output_dir=str(tmp_path / "part")), dataset=dataset)
    # the resumed run keeps the epoch count of the full schedule, so warm-up lines up
    resumed = trainer.run_training(
        tiny_config(output_dir=str(tmp_path / "part")), dataset=dataset, resume=str(tmp_path / "part" / "last")
    )
    assert resumed.state.step == full.state.step
    assert params_equal(resumed.model, full.model)


def test_checkpoint_round_trip(dataset, tmp_path):
    res = trainer.run_training(tiny_config(epochs=1, output_dir=str(tmp_path)), dataset=dataset)
    model, opt, state, cfg = trainer.load_checkpoint(tmp_path / "final")
    assert params_equal(model, res.model) and state.step == res.state.step and opt.t > 0
    assert cfg == res.config
    with pytest.raises(ValueError):
        (tmp_path / "bogus").mkdir()
        (tmp_path / "bogus" / "meta.txt").write_text("format = other\n")
        trainer.load_checkpoint(tmp_path / "bogus")


def test_runs_are_deterministic(dataset, tmp_path):
    cfg = tiny_config(warmup=0.0)
    a = trainer.run_training(cfg.replace(output_dir=str(tmp_path / "a")), dataset=dataset)
    b = trainer.run_training(cfg.replace(output_dir=str(tmp_path / "b")), dataset=dataset)
    assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()
    assert params_equal(a.model, b.model)
    with open(tmp_path / "a" / "train_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == a.state.step and rows[-1]["val_pck"] != ""
    assert a.test_report is not None and (tmp_path / "a" / "test_report.csv").exists()


def test_unlabeled_batch_in_warmup_changes_nothing(dataset):
    cfg = tiny_config(warmup=0.5)
    lab, unl = trainer.split_train(dataset["train"], cfg)
    batch = trainer.build_batch(lab, unl, np.array([], int), np.arange(3), cfg, 0)
    model = trainer.MatchingModel(cfg.model_config(), seed=0)
    before = model.state_dict()
    res = trainer.train_step(model, trainer.make_optimizer(cfg), batch, cfg, 0)
    assert not res.applied
    assert all(np.array_equal(before[k], model.params[k].data) for k in before)


def test_step_level_checkpoint_round_trip(dataset, tmp_path):
    cfg = tiny_config(warmup=0.0)
    lab, unl = trainer.split_train(dataset["train"], cfg)
    batches = [trainer.build_batch(lab, unl, li, ui, cfg, 0) for li, ui in trainer.make_batches(len(lab), len(unl), 5, 0, 0)]
    straight = trainer.MatchingModel(cfg.model_config(), seed=0)
    opt = trainer.make_optimizer(cfg)
    for b in batches[:2]:
        trainer.train_step(straight, opt, b, cfg, 0)

    model = trainer.MatchingModel(cfg.model_config(), seed=0)
    opt = trainer.make_optimizer(cfg)
    trainer.train_step(model, opt, batches[0], cfg, 0)
    trainer.save_checkpoint(tmp_path, model, opt, trainer.TrainState(step=1), cfg)
    model, opt, state, _ = trainer.load_checkpoint(tmp_path)
    trainer.train_step(model, opt, batches[1], cfg, 0)
    assert state.step == 1 and params_equal(model, straight)


def test_zero_epochs_gives_initial_checkpoint(dataset, tmp_path):
    res = trainer.run_training(tiny_config(epochs=0, output_dir=str(tmp_path)), dataset=dataset)
    fresh = trainer.MatchingModel(tiny_config().model_config(), seed=0)
    assert params_equal(res.best_model, fresh)
    assert (tmp_path / "final" / "params.smt").exists() and res.test_report is not None


def test_empty_training_set_aborts():
    with pytest.raises(ValueError):
        trainer.run_training(tiny_config(), dataset={"train": []})


STEP_SCRIPT = """
import hashlib, numpy as np
from semimatch import trainer
cfg = trainer.RunConfig(n_train=10, n_val=0, n_test=0, batch_size=5, label_fraction=0.3, warmup=0.0,
                        channels="4,6", strides="4,2", agg_hidden=2, dtype="float64", min_mean_m=0.0)
ds = trainer.load_dataset(cfg)
lab, unl = trainer.split_train(ds["train"], cfg)
li, ui = trainer.make_batches(len(lab), len(unl), 5, 0, 0)[0]
model = trainer.MatchingModel(cfg.model_config(), seed=0)
trainer.train_step(model, trainer.make_optimizer(cfg), trainer.build_batch(lab, unl, li, ui, cfg, 0), cfg, 0)
h = hashlib.sha256()
for k in sorted(model.params):
    h.update(model.params[k].data.tobytes())
print(h.hexdigest())
"""


def test_fresh_processes_agree_after_one_step():
    import subprocess
    import sys

    runs = [subprocess.run([sys.executable, "-c", STEP_SCRIPT], capture_output=True, text=True, check=True) for _ in range(2)]
    assert runs[0].stdout == runs[1].stdout and len(runs[0].stdout.strip()) == 64


@pytest.mark.parametrize("unsup", ["contrastive", "aepe"])
def test_float32_step_keeps_dtype(dataset, unsup):
    # float64 constants inside a loss must not leak into float32 gradients
    cfg = tiny_config(dtype="float32", warmup=0.0, unsup=unsup, use_fb=False, use_thres=False)
    batch = batch_for(cfg, dataset)
    model = trainer.MatchingModel(cfg.model_config(), seed=0)
    res = trainer.train_step(model, trainer.make_optimizer(cfg), batch, cfg, 0)
    assert res.applied
    assert all(p.data.dtype == np.float32 for p in model.params.values())
