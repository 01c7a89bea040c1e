"""Experiment plumbing: configs, metrics files, checkpoints, training loops,
evaluation, and the ablation grid."""

import dataclasses
import os

import numpy as np
import pytest

from alignrefine import harness as hz
from alignrefine import synthdata as sd
from alignrefine.numcore import ContractViolation, Parameter, Rng
from conftest import TINY_TASK, tiny_config


# -- schedules and validation ------------------------------------------------


def test_lr_schedule_hand_values():
    tc = hz.TrainConfig(lr=1e-3, warmup_steps=100, max_steps=12000,
                        decay_from=6000, lr_end=1e-4)
    assert tc.lr_at(50) == pytest.approx(5e-4)
    assert tc.lr_at(100) == pytest.approx(1e-3)
    assert tc.lr_at(6000) == pytest.approx(1e-3)   # decay starts after decay_from
    assert tc.lr_at(9000) == pytest.approx(5.5e-4)  # midpoint of 1e-3 -> 1e-4
    assert tc.lr_at(12000) == pytest.approx(1e-4)
    flat = hz.TrainConfig(lr=1e-3, warmup_steps=10)
    assert flat.lr_at(10 ** 9) == 1e-3              # decay_from=0 disables decay


def test_train_config_validation():
    with pytest.raises(ContractViolation):
        hz.TrainConfig(beam_size=2).validate("x")
    with pytest.raises(ContractViolation):
        hz.TrainConfig(max_steps=100, decay_from=100).validate("x")
    with pytest.raises(ContractViolation):
        hz.TrainConfig(lr=1e-3, lr_end=2e-3).validate("x")
    with pytest.raises(ContractViolation):
        hz.TrainConfig(eval_interval=0).validate("x")
    hz.TrainConfig().validate("x")


def test_make_experiment_config_derives_linked_fields():
    cfg = tiny_config()
    assert cfg.first_pass.num_labels == cfg.task.num_labels == 6
    assert cfg.first_pass.feature_dim == cfg.task.feature_dim == 4
    assert cfg.refiner.input_dim == cfg.first_pass.dim == 16
    with pytest.raises(ContractViolation):
        hz.make_experiment_config(5, first_pass=dict(num_labels=8))
    with pytest.raises(ContractViolation):
        hz.make_experiment_config(5, nonsense=dict(a=1))


def test_refiner_training_defaults_and_override():
    cfg = hz.make_experiment_config(5)
    assert cfg.train_refiner.spec_augment is True
    assert cfg.train_refiner.max_steps == 1500
    assert not cfg.train_first_pass.spec_augment
    cfg2 = hz.make_experiment_config(5, train_refiner=dict(max_steps=9))
    assert cfg2.train_refiner.max_steps == 9


def test_experiment_config_cross_checks():
    cfg = tiny_config()
    bad = dataclasses.replace(
        cfg, refiner=dataclasses.replace(cfg.refiner, input_dim=17))
    with pytest.raises(ContractViolation):
        bad.validate()


def test_default_config_is_valid():
    cfg = hz.default_config()
    assert cfg.master_seed == 7
    assert cfg.train_first_pass.decay_from == 6000
    cfg.validate()


def test_load_config_toml(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(
        "master_seed = 11\n"
        "[task]\nnum_labels = 6\nfeature_dim = 4\n"
        "[first_pass]\ndim = 16\nheads = 2\n"
        "[train_refiner]\nmax_steps = 40\n"
    )
    cfg = hz.load_config(str(path))
    assert cfg.master_seed == 11
    assert cfg.first_pass.dim == 16
    assert cfg.refiner.input_dim == 16
    assert cfg.first_pass.layers == 3        # unset key -> dataclass default
    assert cfg.train_refiner.max_steps == 40
    assert cfg.train_refiner.spec_augment is True

    (tmp_path / "bad1.toml").write_text("[task]\nnum_labels = 6\nbogus = 1\n")
    with pytest.raises(ContractViolation):
        hz.load_config(str(tmp_path / "bad1.toml"))
    (tmp_path / "bad2.toml").write_text("[mystery]\nx = 1\n")
    with pytest.raises(ContractViolation):
        hz.load_config(str(tmp_path / "bad2.toml"))
    (tmp_path / "bad3.toml").write_text("[first_pass]\nnum_labels = 8\n")
    with pytest.raises(ContractViolation):
        hz.load_config(str(tmp_path / "bad3.toml"))
    (tmp_path / "bad4.toml").write_text('master_seed = "seven"\n')
    with pytest.raises(ContractViolation):
        hz.load_config(str(tmp_path / "bad4.toml"))


def test_config_dict_roundtrip():
    cfg = tiny_config()
    assert hz.config_from_dict(hz.config_to_dict(cfg)) == cfg


def test_describe_config_lists_every_field():
    text = hz.describe_config(tiny_config())
    assert "master_seed = 5" in text
    assert "task.num_labels = 6" in text
    assert "refiner.infer_steps = 2" in text


# -- metrics -----------------------------------------------------------------


def test_metrics_header_and_row_format():
    assert hz.metrics_header(2) == \
        "step,split,loss,wer_first,wer_step1,wer_step2,skips,wall_s"
    row = hz.MetricsRow(10, "dev", 1.5, 30.25, (20.125, 19.0), 1, 2.5)
    text = row.format()
    parts = text.split(",")
    assert parts[0] == "10" and parts[1] == "dev"
    # repr of a float round-trips bitwise
    assert float(parts[3]) == 30.25 and float(parts[4]) == 20.125


def test_metrics_writer(tmp_path):
    path = str(tmp_path / "m.csv")
    w = hz.MetricsWriter(path, 2)
    w.write(hz.MetricsRow(1, "dev", 1.0, 50.0, (40.0, 39.0), 0, 0.0))
    # reopening appends instead of rewriting the header
    w2 = hz.MetricsWriter(path, 2)
    w2.write(hz.MetricsRow(2, "dev", 0.9, 48.0, (38.0, 37.0), 0, 0.0))
    lines = open(path).read().splitlines()
    assert lines[0] == hz.metrics_header(2)
    assert len(lines) == 3
    with pytest.raises(ContractViolation):
        w2.write(hz.MetricsRow(3, "dev", 0.8, 47.0, (36.0,), 0, 0.0))


def test_clocks():
    fixed = hz.FixedClock(3.0)
    assert fixed.now() == fixed.now() == 3.0
    sysclock = hz.SystemClock()
    assert sysclock.now() <= sysclock.now()


# -- checkpoints -------------------------------------------------------------


def _toy_params():
    rng = Rng(3)
    return {
        "w": Parameter("w", rng.normal((3, 2))),
        "b": Parameter("b", rng.normal((2,))),
        "s": Parameter("s", np.array(1.5)),   # rank-0 round-trips too
    }


def test_checkpoint_roundtrip(tmp_path):
    params = _toy_params()
    base = str(tmp_path / "ck")
    hz.save_checkpoint(base, params, {"note": 1}, {"seed": 9})
    arrays, cfg_dict, rng_state = hz.load_checkpoint(base)
    assert cfg_dict == {"note": 1} and rng_state == {"seed": 9}
    for name, p in params.items():
        assert np.array_equal(arrays[name], p.data)
        assert arrays[name].shape == p.data.shape
    fresh = _toy_params()
    for p in fresh.values():
        p.data = p.data * 0.0
    hz.restore_params(fresh, arrays)
    assert hz.params_hash(fresh) == hz.params_hash(params)


def test_checkpoint_rejects_corruption(tmp_path):
    params = _toy_params()
    base = str(tmp_path / "ck")
    hz.save_checkpoint(base, params, {}, {})
    manifest = base + ".manifest"
    text = open(manifest).read()
    open(manifest, "w").write("not a checkpoint\n" + text)
    with pytest.raises(ContractViolation):
        hz.load_checkpoint(base)
    open(manifest, "w").write(text.replace("config\t", "mystery\t"))
    with pytest.raises(ContractViolation):
        hz.load_checkpoint(base)


def test_restore_params_mismatches(tmp_path):
    params = _toy_params()
    with pytest.raises(ContractViolation):
        hz.restore_params(params, {"w": params["w"].data})
    arrays = {n: p.data.copy() for n, p in params.items()}
    arrays["w"] = arrays["w"].T
    with pytest.raises(ContractViolation):
        hz.restore_params(params, arrays)


def test_params_hash_sensitivity():
    a, b = _toy_params(), _toy_params()
    assert hz.params_hash(a) == hz.params_hash(b)
    b["w"].data[0, 0] += 1e-12
    assert hz.params_hash(a) != hz.params_hash(b)


# -- training and evaluation -------------------------------------------------


def test_first_pass_checkpoint_loads(tiny_first_pass):
    model, cfg_dict = hz.load_first_pass(tiny_first_pass)
    again, _ = hz.load_first_pass(tiny_first_pass)
    assert hz.params_hash(model.params) == hz.params_hash(again.params)
    assert cfg_dict["task"]["num_labels"] == 6
    feats = sd.generate_utterance(sd.TaskSpec(**TINY_TASK), "dev", 0, 5).features
    assert np.array_equal(model.encode_causal_np(feats),
                          again.encode_causal_np(feats))


def test_metrics_csv_written(tiny_first_pass):
    csv = os.path.join(os.path.dirname(tiny_first_pass), "first_pass_metrics.csv")
    lines = open(csv).read().splitlines()
    assert lines[0] == hz.metrics_header(0)
    # eval at 10, 20, and the final step 25
    assert [l.split(",")[0] for l in lines[1:]] == ["10", "20", "25"]
    assert all(l.split(",")[1] == "dev" for l in lines[1:])


def test_evaluate_shapes_and_fixed_clock(tiny_corpora, tiny_first_pass, tiny_refiner):
    fp, _ = hz.load_first_pass(tiny_first_pass)
    ref, _ = hz.load_refiner(tiny_refiner)
    row = hz.evaluate(fp, ref, tiny_corpora["dev"], 2, 1,
                      clock=hz.FixedClock(), split="dev")
    assert len(row.wer_steps) == 2
    assert row.wall_s == 0.0
    assert row.split == "dev"
    assert row.wer_first >= 0.0 and row.skips >= 0
    # without a refiner there are no step columns
    bare = hz.evaluate(fp, None, tiny_corpora["dev"], 2, 1, clock=hz.FixedClock())
    assert bare.wer_steps == ()


def test_evaluate_counts_infeasible_targets(tiny_corpora, tiny_first_pass, tiny_refiner):
    fp, _ = hz.load_first_pass(tiny_first_pass)
    ref, _ = hz.load_refiner(tiny_refiner)
    # 2 frames can emit at most 2 * max_emit_per_frame labels; 14 never fit
    impossible = sd.Utterance("dev-99999", np.zeros((2, 4)),
                              (1, 3) * 7, 0)
    row = hz.evaluate(fp, ref, [impossible], 2, 1, clock=hz.FixedClock())
    assert row.skips == 1


def test_training_is_deterministic(tiny_corpora, tmp_path):
    cfg = tiny_config()
    bases = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        base = hz.train_first_pass(cfg, tiny_corpora, str(out), clock=hz.FixedClock())
        bases.append((base, out))
    (base_a, out_a), (base_b, out_b) = bases
    ma, _ = hz.load_first_pass(base_a)
    mb, _ = hz.load_first_pass(base_b)
    assert hz.params_hash(ma.params) == hz.params_hash(mb.params)
    csv_a = open(out_a / "first_pass_metrics.csv", "rb").read()
    csv_b = open(out_b / "first_pass_metrics.csv", "rb").read()
    assert csv_a == csv_b


def test_refiner_training_deterministic_and_frozen(tiny_corpora, tiny_first_pass,
                                                   tmp_path):
    cfg = tiny_config()
    fp_before, _ = hz.load_first_pass(tiny_first_pass)
    hash_before = hz.params_hash(fp_before.params)
    bases = []
    for sub in ("a", "b"):
        base = hz.train_refiner(cfg, tiny_corpora, tiny_first_pass,
                                str(tmp_path / sub), clock=hz.FixedClock())
        bases.append((base, tmp_path / sub))
    ra, _ = hz.load_refiner(bases[0][0])
    rb, _ = hz.load_refiner(bases[1][0])
    assert hz.params_hash(ra.params) == hz.params_hash(rb.params)
    assert open(bases[0][1] / "refiner_metrics.csv", "rb").read() == \
        open(bases[1][1] / "refiner_metrics.csv", "rb").read()
    fp_after, _ = hz.load_first_pass(tiny_first_pass)
    assert hz.params_hash(fp_after.params) == hash_before


def test_refiner_tag_names_outputs(tiny_corpora, tiny_first_pass, tmp_path):
    base = hz.train_refiner(tiny_config(), tiny_corpora, tiny_first_pass,
                            str(tmp_path), clock=hz.FixedClock(), tag="alt")
    assert base.endswith("alt")
    assert (tmp_path / "alt_metrics.csv").exists()


def test_batch_indices_deterministic():
    a = hz._batch_indices(Rng(5), 40, 8)
    b = hz._batch_indices(Rng(5), 40, 8)
    assert a == b and len(a) == 8
    assert all(0 <= i < 40 for i in a)


def test_training_diverged_is_runtime_error():
    assert issubclass(hz.TrainingDiverged, RuntimeError)


# -- ablation grid -----------------------------------------------------------


def test_ablation_grid_runs_and_resumes(tiny_corpora, tiny_first_pass, tmp_path):
    cfg = tiny_config(train_refiner=dict(max_steps=4, eval_interval=2))
    grid = {"refiner.mask_prob": [0.0, 0.1]}
    out = str(tmp_path)
    csv = hz.run_ablation_grid(cfg, grid, tiny_corpora, tiny_first_pass, out,
                               clock=hz.FixedClock(), eval_split="test")
    lines = open(csv).read().splitlines()
    assert lines[0] == "config_id," + hz.metrics_header(2)
    assert len(lines) == 3
    assert lines[1].startswith("refiner.mask_prob=0.0,")
    assert lines[2].startswith("refiner.mask_prob=0.1,")
    before = open(csv, "rb").read()
    messages = []
    hz.run_ablation_grid(cfg, grid, tiny_corpora, tiny_first_pass, out,
                         clock=hz.FixedClock(), log=messages.append,
                         eval_split="test")
    assert open(csv, "rb").read() == before
    assert sum("skipping" in m for m in messages) == 2


def test_ablation_grid_rejects_bad_knobs(tiny_corpora, tiny_first_pass, tmp_path):
    cfg = tiny_config()
    with pytest.raises(ContractViolation):
        hz.run_ablation_grid(cfg, {"refiner.bogus": [1]}, tiny_corpora,
                             tiny_first_pass, str(tmp_path / "x"))
    with pytest.raises(ContractViolation):
        hz.run_ablation_grid(cfg, {"nodots": [1]}, tiny_corpora,
                             tiny_first_pass, str(tmp_path / "y"))
    with pytest.raises(ContractViolation):
        hz.run_ablation_grid(cfg, {"refiner.infer_steps": [1, 2]}, tiny_corpora,
                             tiny_first_pass, str(tmp_path / "z"))


def test_config_id_is_sorted():
    assert hz.config_id_for({"b": 2, "a": 1}) == "a=1;b=2"
