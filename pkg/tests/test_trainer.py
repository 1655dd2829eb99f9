import csv
import dataclasses
import json

import numpy as np
import pytest
import torch
from PIL import Image

from infoclust import cli, model as mdl, trainer
from infoclust.config import preset
from infoclust.data import Dataset, synth_blobs
from infoclust.estimator import InfoClustering

BLOBS = synth_blobs(3, 200, seed=0)


def short(name="a", **kw):
    base = dict(epochs=6, eval_every=3, conv_channels=(8, 16), hidden=32)
    return preset(name, "blobs", **{**base, **kw})


def rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def without_seconds(table):
    return [r[:-1] for r in table]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    return trainer.run(preset("a", "blobs"), BLOBS, out)


# -- metrics and determinism ----------------------------------------------------------------


def test_csv_schema(tmp_path):
    trainer.run(short("w"), BLOBS, tmp_path)
    table = rows(tmp_path / "metrics.csv")
    assert table[0] == ["epoch", "term:mi_xy", "term:mi_yy:geo", "term:kl_reg:geo", "head:0/acc", "selected_acc", "seconds"]
    assert [int(r[0]) for r in table[1:]] == [0, 3, 6]
    assert all(len(r) == len(table[0]) for r in table)
    # epoch 0 is evaluated before any training, so it has no loss terms
    assert table[1][1:4] == ["", "", ""]
    assert all(0 <= float(r[-2]) <= 1 for r in table[1:])


def test_over_clustering_heads_are_not_scored(tmp_path):
    cfg = short("a", heads=(3, 3, 15), epochs=1, eval_every=1)
    trainer.run(cfg, BLOBS, tmp_path)
    assert [c for c in rows(tmp_path / "metrics.csv")[0] if c.startswith("head:")] == ["head:0/acc", "head:1/acc"]


def test_same_seed_gives_identical_metrics(tmp_path):
    trainer.run(short(), BLOBS, tmp_path / "one")
    trainer.run(short(), BLOBS, tmp_path / "two")
    # wall-clock seconds are the only column allowed to differ
    assert without_seconds(rows(tmp_path / "one/metrics.csv")) == without_seconds(rows(tmp_path / "two/metrics.csv"))
    a = mdl.read_checkpoint(tmp_path / "one/checkpoint.ickp")[1]
    b = mdl.read_checkpoint(tmp_path / "two/checkpoint.ickp")[1]
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_different_seeds_differ(tmp_path):
    trainer.run(short(seed=0), BLOBS, tmp_path / "s0")
    trainer.run(short(seed=1), BLOBS, tmp_path / "s1")
    assert without_seconds(rows(tmp_path / "s0/metrics.csv")) != without_seconds(rows(tmp_path / "s1/metrics.csv"))


def test_zero_epochs_logs_only_the_initial_evaluation(tmp_path):
    result = trainer.run(short(epochs=0), BLOBS, tmp_path)
    table = rows(tmp_path / "metrics.csv")
    assert len(table) == 2 and table[1][0] == "0"
    assert abs(result.final.selected_acc - 1 / 3) < 0.15
    assert (tmp_path / "checkpoint.ickp").exists()


def test_blob_oracle(trained):
    assert trained.final.epoch == 50
    assert trained.final.selected_acc >= 0.95


def test_loss_moving_average_does_not_rise(trained):
    loss = np.array([h["loss"] for h in trained.estimator.history_])
    ma = np.convolve(loss, np.ones(10) / 10, mode="valid")
    # minibatch noise leaves small wiggles; anything beyond 0.01 nats is a real rise
    assert np.diff(ma).max() <= 0.01
    assert ma[-1] < ma[0]


# -- label quarantine --------------------------------------------------------------------------


def test_poisoned_labels_do_not_change_training(tmp_path):
    rng = np.random.default_rng(0)
    canary = Dataset("blobs", BLOBS.images.copy(), 3, rng.permutation(BLOBS.evaluation_labels()))
    trainer.run(short(), BLOBS, tmp_path / "clean")
    trainer.run(short(), canary, tmp_path / "poisoned")
    a = mdl.read_checkpoint(tmp_path / "clean/checkpoint.ickp")[1]
    b = mdl.read_checkpoint(tmp_path / "poisoned/checkpoint.ickp")[1]
    assert all(np.array_equal(a[k], b[k]) for k in a)
    clean, poisoned = rows(tmp_path / "clean/metrics.csv"), rows(tmp_path / "poisoned/metrics.csv")
    # loss columns agree; only the accuracies move
    assert [r[:2] for r in clean] == [r[:2] for r in poisoned]
    assert [r[2] for r in clean] != [r[2] for r in poisoned]


def test_fit_ignores_y():
    cfg = short(epochs=2)
    a = InfoClustering.from_config(cfg).fit(BLOBS.images)
    b = InfoClustering.from_config(cfg).fit(BLOBS.images, y=np.zeros(len(BLOBS)))
    assert np.array_equal(a.predict_proba(BLOBS.images), b.predict_proba(BLOBS.images))


# -- resume -----------------------------------------------------------------------------------


def test_resume_matches_an_uninterrupted_run(tmp_path):
    trainer.run(short(epochs=6), BLOBS, tmp_path / "full")
    trainer.run(short(epochs=3), BLOBS, tmp_path / "split")
    resumed = trainer.run(short(epochs=6), BLOBS, tmp_path / "split", resume=True)
    assert [r.epoch for r in resumed.records] == [6]
    full, split = rows(tmp_path / "full/metrics.csv"), rows(tmp_path / "split/metrics.csv")
    assert [r[0] for r in split] == ["epoch", "0", "3", "6"]
    assert without_seconds(full) == without_seconds(split)
    assert float(split[-1][-1]) >= float(split[-2][-1])
    a = mdl.read_checkpoint(tmp_path / "full/checkpoint.ickp")[1]
    b = mdl.read_checkpoint(tmp_path / "split/checkpoint.ickp")[1]
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_resume_of_a_finished_run_adds_nothing(tmp_path):
    trainer.run(short(), BLOBS, tmp_path)
    before = rows(tmp_path / "metrics.csv")
    result = trainer.run(short(), BLOBS, tmp_path, resume=True)
    assert result.records == [] and rows(tmp_path / "metrics.csv") == before


def test_resume_drops_rows_written_after_the_checkpoint(tmp_path):
    trainer.run(short(epochs=3), BLOBS, tmp_path)
    with open(tmp_path / "metrics.csv", "a", newline="") as f:
        csv.writer(f).writerow(["4"] + [""] * 4)
    trainer.run(short(epochs=6), BLOBS, tmp_path, resume=True)
    assert [r[0] for r in rows(tmp_path / "metrics.csv")] == ["epoch", "0", "3", "6"]


def test_resume_with_another_configuration_is_refused(tmp_path):
    trainer.run(short(epochs=3), BLOBS, tmp_path)
    with pytest.raises(ValueError):
        trainer.run(short("w", epochs=6), BLOBS, tmp_path, resume=True)


def test_optimizer_state_survives_the_checkpoint(tmp_path):
    result = trainer.run(short(epochs=3), BLOBS, tmp_path)
    est = trainer.load_run(tmp_path / "checkpoint.ickp")
    for (name, p), q in zip(result.estimator.model_.named_parameters(), est.model_.parameters()):
        a, b = result.estimator.optimizer_.state[p], est.optimizer_.state[q]
        assert float(a["step"]) == float(b["step"])
        assert torch.equal(a["exp_avg"], b["exp_avg"]) and torch.equal(a["exp_avg_sq"], b["exp_avg_sq"]), name


def test_non_finite_images_are_rejected_up_front(tmp_path):
    images = BLOBS.images.copy()
    images[0, 0, 0, 0] = np.nan
    broken = Dataset("blobs", images, 3, BLOBS.evaluation_labels().copy())
    with pytest.raises(ValueError, match="NaN"):
        trainer.run(short(epochs=1), broken, tmp_path)


def test_non_finite_loss_aborts_with_a_diagnostic(tmp_path, monkeypatch):
    from infoclust import core

    real = core.compose_loss
    calls = []

    def diverging(cfg, parts):
        calls.append(1)
        loss = real(cfg, parts)
        return dataclasses.replace(loss, scalar=loss.scalar * float("nan")) if len(calls) > 40 else loss

    monkeypatch.setattr(core, "compose_loss", diverging)
    with pytest.raises(RuntimeError, match="aborted at epoch 2"):
        trainer.run(short(epochs=3), BLOBS, tmp_path)
    # the last good checkpoint is still on disk
    assert mdl.read_checkpoint(tmp_path / "checkpoint.ickp")[0]["meta"]["epoch"] == 0


# -- seed sweep --------------------------------------------------------------------------------


def test_seed_sweep_summary(tmp_path):
    summary = trainer.run_seeds(short(epochs=2, eval_every=2), 3, BLOBS, tmp_path)
    assert summary["seeds"] == [0, 1, 2]
    accs = np.array(summary["selected_acc"])
    assert summary["mean"] == pytest.approx(accs.mean())
    assert summary["std"] == pytest.approx(accs.std(ddof=1))
    assert json.loads((tmp_path / "summary.json").read_text()) == summary
    assert all((tmp_path / f"seed{s}" / "metrics.csv").exists() for s in range(3))


# -- checkpoint consumers ------------------------------------------------------------------------


def test_evaluate_and_probe(trained):
    ckpt = trained.out_dir / "checkpoint.ickp"
    ev = trainer.evaluate(ckpt, BLOBS)
    assert ev["selected_acc"] == pytest.approx(trained.final.selected_acc)
    pr = trainer.probe(ckpt, BLOBS, tap="fc")
    assert pr["accuracy"] >= 0.99 and 0 <= pr["raw_pixels"] <= 1
    for tap in ("conv", "y"):
        assert 0 <= trainer.probe(ckpt, BLOBS, tap=tap, epochs=50)["accuracy"] <= 1


def purity(grid, labels):
    scores = []
    for row in grid:
        members = row[row >= 0]
        if len(members):
            scores.append(np.bincount(labels[members]).max() / len(members))
    return np.mean(scores)


def test_montage_rows_are_pure_after_training(trained, tmp_path):
    (m,) = trainer.montage(trained.out_dir / "checkpoint.ickp", BLOBS, per_cluster=10, out_dir=tmp_path)
    assert m.grid.shape == (3, 10)
    assert purity(m.grid, BLOBS.evaluation_labels()) >= 0.95
    img = Image.open(m.path)
    assert img.size == (10 * 9 + 1, 3 * 9 + 1)


def test_montage_of_an_untrained_model_is_mixed(tmp_path):
    trainer.run(short(epochs=0), BLOBS, tmp_path)
    grids = trainer.montage(tmp_path / "checkpoint.ickp", BLOBS, per_cluster=30)
    assert purity(grids[0].grid, BLOBS.evaluation_labels()) < 0.8


def test_empty_clusters_render_blank_rows(tmp_path):
    est = InfoClustering.from_config(short(epochs=0)).fit(BLOBS.images)
    with torch.no_grad():
        est.model_.heads[0].bias.copy_(torch.tensor([50.0, 0.0, -50.0]))
    trainer.save_run(tmp_path / "c.ickp", est, 0.0, "blobs")
    (m,) = trainer.montage(tmp_path / "c.ickp", BLOBS, per_cluster=4)
    assert np.all(m.grid[2] == -1) and np.all(m.grid[0] >= 0)
    pixels = np.asarray(Image.open(m.path))
    assert pixels[2 * 9 + 1 : 3 * 9].max() == 0


def test_montage_needs_samples(trained):
    with pytest.raises(ValueError):
        trainer.montage(trained.out_dir / "checkpoint.ickp", BLOBS, per_cluster=0)


def test_pretrained_encoder_learns_at_least_twice_as_fast(trained):
    ckpt = trained.out_dir / "checkpoint.ickp"
    kw = dict(epochs=40, n_labels=30, batch_size=30, lr=1e-3)

    def epochs_to(result, target=0.95):
        hits = np.flatnonzero(np.array(result.history) >= target)
        return int(hits[0]) if len(hits) else np.inf

    pre = epochs_to(trainer.finetune(ckpt, BLOBS, **kw))
    scratch = epochs_to(trainer.finetune(ckpt, BLOBS, scratch=True, **kw))
    assert pre <= scratch / 2


def test_zero_finetune_epochs_is_chance(trained):
    result = trainer.finetune(trained.out_dir / "checkpoint.ickp", BLOBS, epochs=0)
    assert result.history == [result.test_accuracy]
    assert result.test_accuracy < 0.6


def test_augment_routes_training_batches_through_the_geometric_transform(trained, monkeypatch):
    from infoclust import transforms

    seen = []
    real = transforms.geometric

    def spy(x, spec, seed=0):
        seen.append(seed)
        return real(x, spec, seed=seed)

    monkeypatch.setattr(transforms, "geometric", spy)
    ckpt = trained.out_dir / "checkpoint.ickp"
    plain = trainer.finetune(ckpt, BLOBS, epochs=2, batch_size=160)
    assert seen == [] and not plain.augment
    aug = trainer.finetune(ckpt, BLOBS, epochs=2, batch_size=160, augment=True)
    assert aug.augment and len(seen) == 2 * 3 and len(set(seen)) == len(seen)
    # the untrained classifier is evaluated before any augmentation happens
    assert plain.history[0] == aug.history[0]


def test_finetune_architecture_mismatch(trained):
    other = synth_blobs(3, 20, image_shape=(1, 6, 6))
    with pytest.raises(ValueError):
        trainer.finetune(trained.out_dir / "checkpoint.ickp", other)


# -- command line --------------------------------------------------------------------------------


def test_cli_run_eval_and_montage(tmp_path, capsys):
    assert cli.main(["run", "--preset", "a", "--dataset", "blobs", "--epochs", "2", "--out", str(tmp_path)]) == 0
    out = json.loads(capsys.readouterr().out)
    ckpt = tmp_path / "a-seed0" / "checkpoint.ickp"
    assert out["epoch"] == 2 and ckpt.exists()
    assert cli.main(["eval", "--checkpoint", str(ckpt)]) == 0
    assert json.loads(capsys.readouterr().out)["selected_head"] == 0
    assert cli.main(["montage", "--checkpoint", str(ckpt), "--per-cluster", "2"]) == 0
    assert (tmp_path / "a-seed0" / "montage_head0.png").exists()


def test_cli_config_file_and_seed_sweep(tmp_path, capsys):
    cfg = short(epochs=1, eval_every=1, out_dir=str(tmp_path))
    cfg.save(tmp_path / "cfg.json")
    assert cli.main(["run", "--config", str(tmp_path / "cfg.json"), "--seeds", "2"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["seeds"] == [0, 1]
    assert (tmp_path / "a" / "summary.json").exists()


def test_cli_resume_continues_numbering(tmp_path, capsys):
    args = ["run", "--preset", "a", "--dataset", "blobs", "--out", str(tmp_path)]
    assert cli.main(args + ["--epochs", "5"]) == 0
    assert cli.main(args + ["--epochs", "10", "--resume"]) == 0
    epochs = [r[0] for r in rows(tmp_path / "a-seed0" / "metrics.csv")[1:]]
    assert epochs == ["0", "5", "10"]


def test_cli_reports_errors(tmp_path, capsys):
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "missing.ickp")]) == 1
    assert "missing.ickp" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli.main(["run", "--preset", "nope"])
