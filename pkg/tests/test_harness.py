import json
import math

import pytest
import torch

from goalunlearn.harness import (
    ExperimentConfig,
    StageError,
    ablate_layers,
    best_within_budget,
    build_corpora,
    emit_plot_data,
    load_or_pretrain,
    load_run,
    parse_groups,
    read_csv_rows,
    run_experiment,
)

SMALL = dict(n_layers=6, d_model=16, n_heads=2, d_ff=32, per_region=1, n_forget_facts=10, n_retain_facts=20,
             n_toxic_per_class=20, n_forget_toxic_per_class=10, n_probe_per_class=20, n_prompts=10,
             pretrain_epochs=2, epochs=2)


def small(**kw):
    return ExperimentConfig(**{**SMALL, **kw})


@pytest.fixture(scope="module")
def small_base():
    cfg = small().resolved()
    c = build_corpora(cfg)
    return c, load_or_pretrain(cfg, c)


def state(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


def test_resolved_defaults():
    tox = ExperimentConfig().resolved()
    assert tox.method == "toxicity-probe"
    assert tox.layers == [0, 1, 3, 4, 5, 7, 8, 9, 11] and tox.update_layers == tox.layers
    assert tox.alpha == tox.alpha_ref == 0.1 and tox.retain_loss == "l2"
    know = ExperimentConfig(goal="knowledge").resolved()
    assert know.method == "cosine-rmu" and know.layers == [4] and know.update_layers == [2, 3, 4]
    assert know.retain_loss == "cosine" and know.alpha == 4.0
    assert know.resolved() == know


def test_config_validation():
    with pytest.raises(ValueError, match="unknown config keys"):
        ExperimentConfig.from_dict({"goal": "toxicity", "alhpa": 1.0})
    with pytest.raises(ValueError):
        ExperimentConfig(goal="knowledge", method="toxicity-probe")
    with pytest.raises(ValueError):
        ExperimentConfig(layers=[12])
    with pytest.raises(ValueError):
        ExperimentConfig(alpha=0.0)
    with pytest.raises(ValueError):
        ExperimentConfig(alpha_mode="bandit")
    with pytest.raises(ValueError):
        ExperimentConfig(n_layers=6, per_region=3)


def test_config_file_roundtrip(tmp_path):
    cfg = small(alpha=2.5, layers=[1, 3])
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert ExperimentConfig.from_file(p) == cfg


def test_pretrain_key_tracks_base_only():
    a = ExperimentConfig()
    assert a.pretrain_key() == ExperimentConfig(alpha=3.0, goal="knowledge").pretrain_key()
    assert a.pretrain_key() != ExperimentConfig(seed=1).pretrain_key()


def test_corpora_are_seeded():
    a, b = build_corpora(small()), build_corpora(small())
    assert a.retain == b.retain and a.prompts == b.prompts
    assert build_corpora(small(seed=1)).retain != a.retain
    assert all(s.toxic for s in a.forget_toxic)


def test_zero_epoch_run_is_noop(small_base):
    c, base = small_base
    before = state(base)
    rep = run_experiment(small(epochs=0), base=base, corpora=c)
    assert rep.pre == rep.post and rep.retain_drift == 0.0 and rep.loss_rows == []
    assert all(torch.equal(v, base.state_dict()[k]) for k, v in before.items())


def test_empty_layer_set_is_noop(small_base):
    c, base = small_base
    rep = run_experiment(small(layers=[], update_layers=[]), base=base, corpora=c)
    assert rep.pre == rep.post and rep.retain_drift == 0.0


def test_run_leaves_base_untouched(small_base):
    c, base = small_base
    before = state(base)
    rep = run_experiment(small(goal="knowledge", lr=1e-2), base=base, corpora=c)
    assert rep.retain_drift > 0
    assert all(torch.equal(v, base.state_dict()[k]) for k, v in before.items())


@pytest.mark.parametrize("kw", [dict(), dict(goal="knowledge"), dict(method="adaptive-rmu"),
                                dict(goal="knowledge", alpha_mode="meta", sigma=0.5)])
def test_total_loss_identity_in_logs(small_base, tmp_path, kw):
    c, base = small_base
    rep = run_experiment(small(**kw), out=tmp_path, base=base, corpora=c)
    rows = read_csv_rows(tmp_path / "losses.csv")
    assert len(rows) == len(rep.loss_rows) > 0
    for r in rows:
        f, a, ret, tot = (float(r[k]) for k in ("forget", "alpha", "retain", "total"))
        assert abs(tot - (f + a * ret)) <= 1e-12
    layers = rep.config["layers"]
    per_layer = read_csv_rows(tmp_path / "layer_losses.csv")
    assert len(per_layer) == len(rows) * len(layers)
    for r in rows:
        mean = sum(float(r[f"forget_layer{i}"]) for i in layers) / len(layers)
        assert float(r["forget"]) == pytest.approx(mean, abs=1e-12)


def test_epoch_rows(small_base, tmp_path):
    c, base = small_base
    run_experiment(small(), out=tmp_path, base=base, corpora=c)
    rows = read_csv_rows(tmp_path / "epochs.csv")
    assert [int(r["epoch"]) for r in rows] == [0, 1, 2]
    assert float(rows[0]["retain_drift"]) == 0.0


def test_meta_trace(small_base, tmp_path):
    c, base = small_base
    rep = run_experiment(small(alpha_mode="meta", alpha=2.0, sigma=0.3), out=tmp_path, base=base, corpora=c)
    recs = rep.alpha_trace.records
    assert len(recs) == len(rep.loss_rows)
    theta = math.log(2.0)
    for rec, row in zip(recs, rep.loss_rows):
        assert rec.alpha == row["alpha"] == math.exp(theta + 0.3 * rec.epsilon)
        theta = rec.theta
    assert len((tmp_path / "alpha_trace.csv").read_text().splitlines()) == len(recs) + 1


def test_identical_config_gives_identical_bundle(small_base, tmp_path):
    c, base = small_base
    for name in ("a", "b"):
        run_experiment(small(alpha_mode="meta"), out=tmp_path / name, base=base, corpora=c, save_model=True)
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert ma == json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert "timing.json" not in ma["artifacts"] and "model.json" in ma["artifacts"]


def test_stage_error_names_stage(tmp_path):
    with pytest.raises(StageError) as info:
        run_experiment(small(checkpoint=str(tmp_path / "missing.json")))
    assert info.value.stage == "pretrain"
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(StageError) as info:
        run_experiment(small(), out=blocker / "sub")
    assert info.value.stage == "output"


def test_checkpoint_mismatch_rejected(small_base, tmp_path):
    from goalunlearn.model import save_checkpoint
    _, base = small_base
    save_checkpoint(base, tmp_path / "b.json")
    with pytest.raises(StageError):
        run_experiment(small(n_layers=9, checkpoint=str(tmp_path / "b.json")))


def test_parse_groups():
    assert parse_groups("0;1;0,1,3") == [[0], [1], [0, 1, 3]]
    assert parse_groups("2;") == [[2], []]


def test_ablation_rows(small_base, tmp_path):
    c, base = small_base
    rows = ablate_layers(small(), [[], [1], [1], [0, 2], [0, 2, 4], [99]], out=tmp_path, base=base)
    assert [r["size"] for r in rows] == [0, 1, 1, 2, 3, 1]
    assert rows[1] == rows[2]
    assert all(r["status"] == "ok" for r in rows[:5])
    assert rows[5]["status"].startswith("failed")
    pre = run_experiment(small(epochs=0), base=base, corpora=c).pre
    assert (rows[0]["toxicity_rate"], rows[0]["utility"]) == (pre.U, pre.R)
    csv_rows = read_csv_rows(tmp_path / "ablation.csv")
    assert len(csv_rows) == 6 and csv_rows[5]["toxicity_rate"] == ""


def test_best_within_budget():
    rows = [{"epoch": 0, "U": 0.5, "retain_drift": 0.0}, {"epoch": 1, "U": 0.2, "retain_drift": 3.0},
            {"epoch": 2, "U": 0.1, "retain_drift": 9.0}]
    assert best_within_budget(rows, 5.0)["epoch"] == 1
    assert best_within_budget(rows, 0.0)["epoch"] == 0


def test_plot_data_reemit_is_byte_identical(small_base, tmp_path):
    c, base = small_base
    run_experiment(small(), out=tmp_path / "run", base=base, corpora=c)
    runs = [load_run(tmp_path / "run")]
    abl = [{"group": "1", "size": 1, "toxicity_rate": 0.1, "utility": 0.9, "s_unlearning": 0.5, "status": "ok"}] * 5
    m1 = emit_plot_data(runs, tmp_path / "p1", abl)
    m2 = emit_plot_data(runs, tmp_path / "p2", abl)
    assert m1 == m2
    for name in m1["artifacts"]:
        assert (tmp_path / "p1" / name).read_bytes() == (tmp_path / "p2" / name).read_bytes()
    assert len(read_csv_rows(tmp_path / "p1" / "ablation_scatter.csv")) == 5
    curves = read_csv_rows(tmp_path / "p1" / "loss_curves.csv")
    assert len(curves) == len(runs[0]["layer_rows"])
