import warnings

import numpy as np
import pytest
from sklearn.base import clone

from ssgrounding import ablation, experiment, gradcheck
from ssgrounding.cli import main
from ssgrounding.config import (
    ConfigError,
    ExperimentConfig,
    default_output_dir,
    dump_config,
    load_config,
    parse_config_text,
)
from ssgrounding.estimator import SupportSetGrounder
from ssgrounding.grounding import GroundingSample
from ssgrounding.io import (
    Checkpoint,
    CheckpointError,
    ConfigHashWarning,
    ManifestError,
    ingest_features,
    load_checkpoint,
    read_csv,
    read_features,
    read_predictions,
    save_checkpoint,
    write_csv,
    write_features,
    write_manifest,
    write_predictions,
)
from ssgrounding.reports import emit_reports

SMALL = dict(n_train=24, n_val=8, n_test=8, T=8, n_entities=6, n_actions=4, D=8, D_v=6, D_l=4,
             t_max=8, steps=6, batch_size=8, val_every=3, plateau_patience=5)
SMALL_TEXT = "".join(f"{k} = {v}\n" for k, v in SMALL.items())


@pytest.fixture(scope="module")
def small_cfg():
    return ExperimentConfig(**SMALL)


@pytest.fixture(scope="module")
def splits(small_cfg):
    return experiment.build_splits(small_cfg)


@pytest.fixture(scope="module")
def fitted(small_cfg, splits):
    return experiment.train(small_cfg, splits)


class TestConfig:
    def test_typed_values(self):
        vals = parse_config_text("steps = 7\ntau=0.2 # comment\nuse_caption = off\nrank_m = 0.3,0.5\n")
        assert vals == {"steps": 7, "tau": 0.2, "use_caption": False, "rank_m": (0.3, 0.5)}

    @pytest.mark.parametrize("text", ["bogus = 1", "steps = 1\nsteps = 2", "steps", "steps = many",
                                      "use_caption = maybe"])
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            parse_config_text(text)

    def test_invalid_value_in_validation(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(pooling="lstm")
        with pytest.raises(ConfigError):
            ExperimentConfig(plateau_factor=1.5)

    def test_overrides_win_and_none_ignored(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("seed = 3\nmode = gtc\n")
        cfg = load_config(path, {"seed": 9, "mode": None, "pooling": "sa"})
        assert (cfg.seed, cfg.mode, cfg.pooling) == (9, "gtc", "SA")

    def test_unknown_override(self):
        with pytest.raises(ConfigError):
            load_config(None, {"nope": 1})

    def test_dump_round_trip(self, tmp_path):
        cfg = ExperimentConfig(tau=0.07, rank_m=(0.3, 0.5), vocab_size=40, use_caption=False)
        path = tmp_path / "c.txt"
        path.write_text(dump_config(cfg))
        back = load_config(path)
        assert back == cfg and back.config_hash() == cfg.config_hash()

    def test_hash_sensitive(self):
        assert ExperimentConfig().config_hash() != ExperimentConfig(lambda1=0.2).config_hash()

    def test_output_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv("SSGROUNDING_OUT", str(tmp_path))
        assert default_output_dir() == tmp_path


class TestFeaturesAndManifest:
    def test_features_round_trip_and_size(self, tmp_path, rng):
        F = rng.normal(size=(3, 4))
        write_features(tmp_path / "f.bin", F)
        assert (tmp_path / "f.bin").stat().st_size == 48
        np.testing.assert_array_equal(read_features(tmp_path / "f.bin", 3, 4), F.astype(np.float32))
        with pytest.raises(ManifestError, match="48 bytes"):
            read_features(tmp_path / "f.bin", 4, 4, "vid")

    def test_manifest_round_trip(self, tmp_path, splits):
        path = write_manifest(tmp_path / "m.jsonl", splits.test)
        back = ingest_features(path)
        assert [s.video_id for s in back] == [s.video_id for s in splits.test]
        for a, b in zip(back, splits.test):
            np.testing.assert_array_equal(a.features, b.features.astype(np.float32))
            np.testing.assert_array_equal(a.tokens, b.tokens)
            assert a.gt_seconds == b.gt_seconds

    @pytest.mark.parametrize("line, match", [
        ("{not json", "malformed"),
        ('{"video_id": "a", "T": 2}', "missing keys"),
        ('{"video_id": "a", "T": 2, "D_v": 1, "features": "x.f32", "tokens": [1], '
         '"gt": [0, 1], "clip_duration_s": 1}', "not found"),
    ])
    def test_manifest_errors(self, tmp_path, line, match):
        (tmp_path / "m.jsonl").write_text(line + "\n")
        with pytest.raises(ManifestError, match=match):
            ingest_features(tmp_path / "m.jsonl")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ManifestError):
            ingest_features(tmp_path / "none.jsonl")


class TestTextFormats:
    def test_predictions(self, tmp_path, splits):
        s = splits.test[:2]
        write_predictions(tmp_path / "p.jsonl", s, [[(0.0, 2.0, 0.9)], [(1.0, 3.0, 0.5), (0.0, 1.0, 0.1)]])
        recs = read_predictions(tmp_path / "p.jsonl")
        assert recs[1]["spans"] == [[1.0, 3.0, 0.5], [0.0, 1.0, 0.1]]
        assert recs[0]["video_id"] == s[0].video_id

    def test_csv_floats_exact(self, tmp_path):
        write_csv(tmp_path / "x.csv", ["a", "b"], [(0.1, 2), (1 / 3, "z")])
        rows = read_csv(tmp_path / "x.csv")
        assert float(rows[1]["a"]) == 1 / 3 and rows[1]["b"] == "z"


class TestCheckpoint:
    def ckpt(self):
        return Checkpoint({"w": np.arange(6.0).reshape(2, 3)}, {"w": np.ones((2, 3))},
                          {"w": np.zeros((2, 3))}, {"step": 4, "config_hash": "abc"}, np.arange(5))

    def test_bytes_deterministic(self, tmp_path):
        save_checkpoint(tmp_path / "a.npz", self.ckpt())
        save_checkpoint(tmp_path / "b.npz", self.ckpt())
        assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()

    def test_round_trip(self, tmp_path):
        back = load_checkpoint(save_checkpoint(tmp_path / "a.npz", self.ckpt()))
        np.testing.assert_array_equal(back.params["w"], self.ckpt().params["w"])
        np.testing.assert_array_equal(back.perm, np.arange(5))
        assert back.step == 4

    def test_hash_mismatch_warns(self, tmp_path):
        path = save_checkpoint(tmp_path / "a.npz", self.ckpt())
        with pytest.warns(ConfigHashWarning):
            load_checkpoint(path, "other")
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            load_checkpoint(path, "abc")

    @pytest.mark.parametrize("damage", ["truncate", "garbage", "flip"])
    def test_corrupt(self, tmp_path, damage):
        path = save_checkpoint(tmp_path / "a.npz", self.ckpt())
        data = bytearray(path.read_bytes())
        if damage == "truncate":
            data = data[:len(data) // 2]
        elif damage == "garbage":
            data = bytearray(b"not a checkpoint")
        else:
            data[120] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "none.npz")


class TestEstimator:
    def test_fit_history_and_outputs(self, fitted, splits):
        assert fitted.step_ == SMALL["steps"] and len(fitted.history_) == SMALL["steps"]
        assert "val_loss" in fitted.history_[2]
        scores = fitted.decision_function(splits.test)
        assert all(np.all((p > 0) & (p < 1)) and p.size == s.T * (s.T + 1) // 2
                   for p, s in zip(scores, splits.test))
        ranked = fitted.predict(splits.test, top_k=5)
        assert all(1 <= len(r) <= 5 and r[0][2] >= r[-1][2] for r in ranked)
        assert 0.0 <= fitted.score(splits.test) <= 1.0
        assert fitted.transform(splits.test).shape == (len(splits.test), SMALL["D"])

    def test_rank1_rate_matches_evaluate(self, fitted, splits):
        report = fitted.evaluate(splits.test, ns=(1,), ms=(0.5,))
        assert report.rank[(1, 0.5)] == fitted.rank1_rate(splits.test, 0.5)

    def test_clone_and_params(self, fitted):
        c = clone(fitted)
        assert c.get_params() == fitted.get_params() and not hasattr(c, "params_")

    def test_unfitted(self, splits):
        with pytest.raises(Exception, match="not fitted"):
            SupportSetGrounder().predict(splits.test)

    def test_bad_hyperparameter(self, splits):
        with pytest.raises(ValueError):
            SupportSetGrounder(tau=0.0, steps=1).fit(splits.train)

    def test_wrong_feature_width(self, fitted, splits):
        s = splits.test[0]
        bad = GroundingSample("x", np.zeros((s.T, 3)) + 1.0, s.tokens, s.gt_seconds, s.clip_duration_s)
        with pytest.raises(ValueError):
            fitted.predict([bad])

    def test_same_seed_same_params(self, small_cfg, splits, fitted):
        again = experiment.train(small_cfg, splits)
        assert all(np.array_equal(again.params_[k], fitted.params_[k]) for k in fitted.params_)

    def test_checkpoint_resume_bitwise(self, small_cfg, splits, tmp_path):
        full = experiment.make_estimator(small_cfg, vocab_size=experiment.resolve_vocab_size(small_cfg, splits))
        full.fit(splits.train, validation=splits.val)
        half = clone(full).set_params(steps=3).fit(splits.train, validation=splits.val)
        path = save_checkpoint(tmp_path / "c.npz", half.to_checkpoint("h"))
        resumed = SupportSetGrounder.from_checkpoint(load_checkpoint(path), steps=SMALL["steps"])
        resumed.fit(splits.train, validation=splits.val)
        assert all(np.array_equal(resumed.params_[k], full.params_[k]) for k in full.params_)
        assert resumed.history_ == full.history_


class TestAblation:
    def test_cells(self):
        assert len(ablation.toggle_cells()) == 9
        assert len(ablation.grid_cells()) == 18
        assert ablation.grid_cells()[0].name == "ss/V-SS+CA/contrast+caption"

    def test_rows_and_csv(self, small_cfg, tmp_path):
        cells = [ablation.AblationCell("baseline", False, False), ablation.AblationCell("ss")]
        rows = ablation.run_ablation(small_cfg.replace(steps=2), cells, [0, 1])
        assert len(rows) == 4 and all(r.error is None for r in rows)
        ablation.write_ablation_csv(tmp_path / "a.csv", rows)
        ablation.write_summary_csv(tmp_path / "s.csv", rows)
        assert len(read_csv(tmp_path / "a.csv")) == 4
        assert [r["cell"] for r in read_csv(tmp_path / "s.csv")] == ["baseline", "ss/V-SS+CA/contrast+caption"]

    def test_empty_support_set_becomes_error_row(self, small_cfg, tmp_path, rng):
        # every ground truth spans the whole video, so there is no background
        samples = [GroundingSample(f"v{i}", rng.normal(size=(4, 6)), np.array([1, 2]), (0.0, 4.0), 1.0)
                   for i in range(12)]
        path = write_manifest(tmp_path / "m.jsonl", samples)
        cfg = small_cfg.replace(dataset=str(path), n_val=2, n_test=2, steps=2)
        row = ablation.run_cell(cfg, ablation.AblationCell("ss", construction="Non-GT-SS"), 0)
        assert row.error.startswith("EmptySupportSetError") and not row.metrics


def test_emit_reports(fitted, splits, tmp_path):
    paths = emit_reports(fitted, splits.test, tmp_path)
    assert all(p.is_file() for p in paths.values())
    sim = read_csv(paths["similarity"])
    assert len(sim) == len(splits.test)
    hist = read_csv(paths["histogram"])
    assert len(hist) == 100 and sum(int(r["count"]) for r in hist) <= len(splits.test)


def test_gradcheck_small_suite():
    rows = gradcheck.run_suite(seeds=range(2))
    summary = gradcheck.summarize(rows)
    assert len({(c, p) for _, c, p, _ in summary if c}) == 18
    assert max(e for *_, e in summary) < 1e-4


class TestCli:
    @pytest.fixture
    def config_file(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text(SMALL_TEXT)
        return path

    def test_train_evaluate_report(self, config_file, tmp_path, capsys):
        out = tmp_path / "run"
        args = ["--config", str(config_file), "--out", str(out), "--threads", "1"]
        assert main(["train", *args, "--pooling", "sa"]) == 0
        assert "R1@0.5" in capsys.readouterr().out
        for name in ("config.txt", "checkpoint.npz", "train_log.csv", "metrics.csv", "predictions.jsonl"):
            assert (out / name).is_file()
        assert load_config(out / "config.txt").pooling == "SA"
        assert main(["evaluate", *args, "--pooling", "sa"]) == 0
        with pytest.warns(ConfigHashWarning):
            assert main(["report", *args]) == 0
        assert (out / "reports" / "recall_curves.csv").is_file()

    def test_env_output_dir(self, config_file, tmp_path, monkeypatch):
        monkeypatch.setenv("SSGROUNDING_OUT", str(tmp_path / "env"))
        assert main(["train", "--config", str(config_file)]) == 0
        assert (tmp_path / "env" / "checkpoint.npz").is_file()

    def test_unknown_key_is_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.txt"
        bad.write_text("learning_rat = 0.1\n")
        assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2
        assert "unknown key" in capsys.readouterr().err

    def test_missing_checkpoint(self, config_file, tmp_path, capsys):
        assert main(["evaluate", "--config", str(config_file), "--out", str(tmp_path / "x")]) == 2
        assert "not found" in capsys.readouterr().err

    def test_bad_choice_exits(self):
        with pytest.raises(SystemExit):
            main(["train", "--pooling", "lstm"])

    def test_gradcheck(self, tmp_path, capsys):
        assert main(["gradcheck", "--seeds", "1", "--out", str(tmp_path)]) == 0
        assert len(read_csv(tmp_path / "gradcheck.csv")) > 18
        assert "worst" in capsys.readouterr().out

    def test_ablate(self, config_file, tmp_path):
        cfg = tmp_path / "a.txt"
        cfg.write_text(SMALL_TEXT.replace("steps = 6", "steps = 1"))
        assert main(["ablate", "--config", str(cfg), "--grid", "toggles", "--out", str(tmp_path)]) == 0
        assert len(read_csv(tmp_path / "ablation.csv")) == 9
