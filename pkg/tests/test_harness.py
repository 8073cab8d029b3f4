"""Training driver and evaluation harness: WER, config surface,
determinism, checkpoint contracts, report identities, CLI round trip."""

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from vsrkit import cli, corpus, harness
from vsrkit.checkpoint import load_checkpoint
from vsrkit.config import RunConfig, load_config, parse_config_text
from vsrkit.errors import CheckpointError, ConfigError
from vsrkit.model import Stage1Model, Stage2Model
from vsrkit.recognizer import Hypothesis


class TestWer:
    def test_identical_sequences(self):
        assert harness.wer("a b c".split(), "a b c".split()) == 0.0

    def test_textbook_case(self):
        got = harness.wer("the cat sat".split(), "the mat".split())
        np.testing.assert_allclose(got, 2 / 3, atol=1e-12)

    def test_empty_hypothesis_all_deletions(self):
        assert harness.wer("a b c".split(), []) == 1.0

    def test_empty_reference_rejected(self):
        with pytest.raises(ConfigError):
            harness.wer([], "a".split())

    def test_against_dp_oracle(self, rng):
        vocab = ["a", "b", "c", "d"]

        def brute_distance(ref, hyp):
            # recursive definition, memoized
            from functools import lru_cache

            @lru_cache(maxsize=None)
            def d(i, j):
                if i == 0:
                    return j
                if j == 0:
                    return i
                return min(d(i - 1, j) + 1, d(i, j - 1) + 1,
                           d(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1]))

            return d(len(ref), len(hyp))

        for _ in range(30):
            ref = [vocab[i] for i in rng.integers(0, 4, rng.integers(1, 6))]
            hyp = [vocab[i] for i in rng.integers(0, 4, rng.integers(0, 6))]
            want = brute_distance(tuple(ref), tuple(hyp)) / len(ref)
            np.testing.assert_allclose(harness.wer(ref, hyp), want,
                                       atol=1e-12)


class TestConfig:
    def test_parse_and_override(self):
        cfg = parse_config_text("""
            # comment
            stage = 2
            lam = 0.25
            fusion = avg
            stage_channels = 8,16
            augment = false
        """)
        assert cfg.stage == 2 and cfg.lam == 0.25 and cfg.fusion == "avg"
        assert cfg.stage_channels == (8, 16) and cfg.augment is False

    def test_default_lam_from_config(self):
        assert RunConfig().lam == 0.1

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("no_such_key = 1")

    def test_bad_values_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("lam = 1.5").validate()
        with pytest.raises(ConfigError):
            parse_config_text("fusion = maximal").validate()
        with pytest.raises(ConfigError):
            parse_config_text("stage = 2\ninit = stage1_checkpoint").validate()

    def test_file_round_trip(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed = 9\nsteps = 7\n")
        cfg = load_config(path, overrides=["steps = 11"])
        assert cfg.seed == 9 and cfg.steps == 11


@pytest.fixture(scope="module")
def toy_data(tmp_path_factory):
    data_dir = tmp_path_factory.mktemp("toydata")
    corpus.generate_corpus(data_dir, num_clips=40, seed=77)
    harness.build_units(data_dir, codebook_size=16, seed=77)
    return data_dir


def tiny_cfg(data_dir, out_dir, **kw):
    base = dict(data_dir=str(data_dir), out_dir=str(out_dir), steps=3,
                batch_size=4, log_every=0, codebook_size=16,
                stage_channels=(8, 16), embed_dim=16, num_regions=2,
                enc_layers=1, dec_layers=1, heads=2)
    base.update(kw)
    return RunConfig(**base)


class TestTrainStage1:
    def test_zero_steps_checkpoint_equals_initialization(self, toy_data,
                                                         tmp_path):
        cfg = tiny_cfg(toy_data, tmp_path / "run", steps=0, stage=1)
        ckpt = harness.train_stage1(cfg)
        state = load_checkpoint(ckpt)
        init = Stage1Model(cfg).state()
        assert set(state) == set(init)
        for name in state:
            np.testing.assert_array_equal(state[name], init[name])

    def test_same_seed_identical_loss_curves(self, toy_data, tmp_path):
        cfg1 = tiny_cfg(toy_data, tmp_path / "a", stage=1, steps=3)
        cfg2 = tiny_cfg(toy_data, tmp_path / "b", stage=1, steps=3)
        p1 = harness.train_stage1(cfg1)
        p2 = harness.train_stage1(cfg2)
        log1 = (tmp_path / "a" / "stage1_losses.tsv").read_text()
        log2 = (tmp_path / "b" / "stage1_losses.tsv").read_text()
        assert log1 == log2
        assert p1.read_bytes() == p2.read_bytes()

    def test_missing_units_fails_before_any_step(self, tmp_path):
        data_dir = tmp_path / "bare"
        corpus.generate_corpus(data_dir, num_clips=10, seed=1)
        cfg = tiny_cfg(data_dir, tmp_path / "run", stage=1)
        with pytest.raises(ConfigError, match="unit cache"):
            harness.train_stage1(cfg)

    def test_global_only_branch_trains(self, toy_data, tmp_path):
        cfg = tiny_cfg(toy_data, tmp_path / "g", stage=1, steps=2,
                       stage1_branches="global")
        assert harness.train_stage1(cfg).is_file()


class TestTrainStage2:
    def test_stage1_init_loads_frontend_tensors(self, toy_data, tmp_path):
        cfg1 = tiny_cfg(toy_data, tmp_path / "s1", stage=1, steps=2)
        ckpt1 = harness.train_stage1(cfg1)
        state1 = load_checkpoint(ckpt1)
        cfg2 = tiny_cfg(toy_data, tmp_path / "s2", stage=2, steps=0,
                        init="stage1_checkpoint", init_checkpoint=str(ckpt1))
        ckpt2 = harness.train_stage2(cfg2)
        state2 = load_checkpoint(ckpt2)
        carried = [k for k in state2
                   if k.startswith(("frontend.", "dualpath."))]
        assert carried
        for name in carried:
            np.testing.assert_array_equal(state2[name], state1[name])
        assert not any(k.startswith("align.") for k in state2)

    def test_checkpoint_mismatch_is_itemized(self, toy_data, tmp_path):
        cfg1 = tiny_cfg(toy_data, tmp_path / "s1m", stage=1, steps=0,
                        stage_channels=(4, 8))
        ckpt1 = harness.train_stage1(cfg1)
        cfg2 = tiny_cfg(toy_data, tmp_path / "s2m", stage=2, steps=0,
                        init="stage1_checkpoint", init_checkpoint=str(ckpt1))
        with pytest.raises(CheckpointError, match="shape mismatch"):
            harness.train_stage2(cfg2)

    def test_avg_and_cem_diverge_after_first_step(self, toy_data, tmp_path):
        base = dict(stage=2, steps=2)
        cfg_a = tiny_cfg(toy_data, tmp_path / "avg", fusion="avg", **base)
        cfg_c = tiny_cfg(toy_data, tmp_path / "cem", fusion="cem", **base)
        harness.train_stage2(cfg_a)
        harness.train_stage2(cfg_c)
        log_a = (tmp_path / "avg" / "stage2_losses.tsv").read_text()
        log_c = (tmp_path / "cem" / "stage2_losses.tsv").read_text()
        assert log_a.splitlines()[2] != log_c.splitlines()[2]

    def test_stage2_determinism(self, toy_data, tmp_path):
        cfg1 = tiny_cfg(toy_data, tmp_path / "d1", stage=2, steps=3)
        cfg2 = tiny_cfg(toy_data, tmp_path / "d2", stage=2, steps=3)
        harness.train_stage2(cfg1)
        harness.train_stage2(cfg2)
        assert ((tmp_path / "d1" / "stage2_losses.tsv").read_text()
                == (tmp_path / "d2" / "stage2_losses.tsv").read_text())


@pytest.fixture(scope="module")
def trained(toy_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("eval")
    cfg = tiny_cfg(toy_data, out, stage=2, steps=2)
    ckpt = harness.train_stage2(cfg)
    return cfg, ckpt


class TestEvaluate:

    def test_perfect_oracle_hypotheses_zero_wer(self, trained):
        cfg, ckpt = trained
        refs = {r.clip_id: r.transcript
                for r in corpus.load_manifest(cfg.data_dir)}
        ids = sorted(cid for cid, _ in refs.items()
                     if cid.startswith("test-"))
        it = iter(ids)

        def oracle(model, frames):
            text = refs[next(it)]
            return Hypothesis(tokens=[], text=text, score=0.0,
                              ctc_score=0.0, attn_score=0.0)

        report = harness.evaluate(cfg, ckpt, decode_fn=oracle, write=False)
        assert report.overall_wer == 0.0
        for factor in report.factors.values():
            for cell in factor.values():
                assert cell["wer"] == 0.0

    def test_bin_counts_match_manifest(self, trained):
        cfg, ckpt = trained
        rows = [r for r in corpus.load_manifest(cfg.data_dir)
                if r.split == "test"]

        def stub(model, frames):
            return Hypothesis(tokens=[], text="bat", score=0.0,
                              ctc_score=0.0, attn_score=0.0)

        report = harness.evaluate(cfg, ckpt, decode_fn=stub, write=False)
        assert report.num_clips == len(rows)
        for factor, levels in harness.FACTORS:
            for lvl in levels:
                want = sum(1 for r in rows
                           if getattr(r.condition, factor) == lvl)
                got = report.factors[factor].get(lvl, {"count": 0})["count"]
                assert got == want

    def test_partition_consistency_identity(self, trained):
        cfg, ckpt = trained
        rng = np.random.default_rng(5)

        def noisy(model, frames):
            text = "bat" if rng.random() < 0.5 else "dog kip"
            return Hypothesis(tokens=[], text=text, score=0.0,
                              ctc_score=0.0, attn_score=0.0)

        report = harness.evaluate(cfg, ckpt, decode_fn=noisy, write=False)
        assert harness.partition_consistency_gap(report) < 1e-9

    def test_report_files_and_table_shape(self, trained, tmp_path):
        cfg, ckpt = trained
        cfg2 = replace(cfg, out_dir=str(tmp_path / "rep"))
        report = harness.evaluate(cfg2, ckpt)
        out = Path(cfg2.out_dir)
        data = json.loads((out / "report.json").read_text())
        assert set(data["factors"]) == {"illumination", "occlusion", "blur",
                                        "pose"}
        table = (out / "report.txt").read_text()
        # 11 condition columns in the wide row
        assert len(table.splitlines()[2].split()) == 11
        hyp_lines = (out / "hypotheses.jsonl").read_text().splitlines()
        assert len(hyp_lines) == report.num_clips
        rec = json.loads(hyp_lines[0])
        assert set(rec) == {"clip_id", "reference", "hypothesis",
                            "ctc_score", "attn_score", "joint_score"}

    def test_empty_bin_absent_not_zero(self):
        report = harness.EvalReport(
            overall_wer=0.5, num_clips=2,
            factors={"illumination": {"B": {"count": 2, "wer": 0.5}},
                     "occlusion": {}, "blur": {}, "pose": {}},
            clips=[])
        table = harness.format_condition_table(report)
        assert "-" in table

    def test_heatmap_export(self, trained, tmp_path):
        cfg, ckpt = trained
        rows = corpus.load_manifest(cfg.data_dir)
        cid = rows[0].clip_id
        written = harness.export_heatmaps(cfg, ckpt, [cid],
                                          tmp_path / "heat")
        stem = written[0]
        from vsrkit.tensorio import read_heatmap
        maps = read_heatmap(stem)
        assert maps.ndim == 4 and maps.shape[0] == cfg.num_regions
        sums = maps.sum(axis=0)
        np.testing.assert_allclose(sums, 1.0, atol=1e-9)


class TestCli:
    def test_full_pipeline_exit_codes(self, tmp_path, capsys):
        data = tmp_path / "data"
        cfgfile = tmp_path / "run.cfg"
        cfgfile.write_text(
            "steps = 2\nbatch_size = 2\nlog_every = 0\n"
            "stage_channels = 8,16\nembed_dim = 16\nnum_regions = 2\n"
            "enc_layers = 1\ndec_layers = 1\nheads = 2\n"
            f"codebook_size = 16\ndata_dir = {data}\n"
            f"out_dir = {tmp_path / 'run'}\n")
        assert cli.main(["corpus", "--config", str(cfgfile), "--clips", "16",
                        "--seed", "5"]) == 0
        assert cli.main(["units", "--config", str(cfgfile), "--seed", "5"]) == 0
        assert cli.main(["train-stage1", "--config", str(cfgfile)]) == 0
        assert cli.main(["train-stage2", "--config", str(cfgfile),
                         "--set", "init = scratch"]) == 0
        ckpt = tmp_path / "run" / "stage2.vsck"
        assert cli.main(["eval", "--config", str(cfgfile), "--checkpoint",
                         str(ckpt)]) == 0
        report = tmp_path / "run" / "report.json"
        assert report.is_file()
        assert cli.main(["report", str(report)]) == 0
        rows = corpus.load_manifest(data)
        assert cli.main(["heatmaps", "--config", str(cfgfile),
                         "--checkpoint", str(ckpt), "--out",
                         str(tmp_path / "hm"), rows[0].clip_id]) == 0
        capsys.readouterr()

    def test_error_paths_return_nonzero(self, tmp_path, capsys):
        assert cli.main(["train-stage1", "--set", "lam = 7"]) == 1
        assert cli.main(["train-stage2", "--set",
                         "init = stage1_checkpoint"]) == 1
        capsys.readouterr()


class TestAblate:
    def test_grid_runs_and_reports(self, toy_data, tmp_path, capsys):
        cfg = tiny_cfg(toy_data, tmp_path / "ab", stage=2, steps=1,
                       batch_size=2)
        results = harness.ablate(cfg, stage1_steps=1)
        assert len(results) == len(harness.ABLATION_ROWS)
        assert {(r["stage1"], r["stage2"], r["fusion"]) for r in results} == {
            ("none", "global", "none"), ("global", "global", "none"),
            ("global_local", "global", "none"),
            ("global_local", "local", "none"),
            ("global_local", "global_local", "avg"),
            ("global_local", "global_local", "cem")}
        table = (tmp_path / "ab" / "ablation.tsv").read_text()
        assert len(table.splitlines()) == 7
        capsys.readouterr()
