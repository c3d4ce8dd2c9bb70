import hashlib
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from unitdenoise.config import (
    ConfigError,
    PipelineConfig,
    load_config,
    parse_config,
    serialize_config,
)
from unitdenoise.pipeline import Pipeline, StaleInputError

REPO = Path(__file__).resolve().parent.parent
MICRO = REPO / "configs" / "micro.cfg"


def test_parse_defaults_and_values():
    cfg = parse_config("seed = 5\nquantizer.k = 32\n")
    assert cfg.seed == 5
    assert cfg.quantizer.k == 32
    assert cfg.train.epochs == 18  # default


def test_config_roundtrip_fixed_point():
    cfg = load_config(MICRO)
    text = serialize_config(cfg)
    again = parse_config(text)
    assert again == cfg
    assert serialize_config(again) == text


def test_config_error_carries_field_path():
    with pytest.raises(ConfigError, match="quantizer.k"):
        parse_config("seed = 1\nquantizer.k = one\n")
    with pytest.raises(ConfigError, match="unknown"):
        parse_config("seed = 1\nquantizer.clusters = 4\n")
    with pytest.raises(ConfigError, match="seed"):
        parse_config("quantizer.k = 4\n")
    with pytest.raises(ConfigError, match="adapt.n_recordings"):
        parse_config("seed = 1\nadapt.n_recordings = 9\n")


def test_comments_and_blank_lines_ignored():
    cfg = parse_config("# header\nseed = 3\n\ntrain.epochs = 2  # short\n")
    assert cfg.train.epochs == 2


@pytest.fixture(scope="module")
def micro_run(tmp_path_factory):
    work = tmp_path_factory.mktemp("micro_pipeline")
    cfg = load_config(MICRO)
    pipe = Pipeline(cfg, work)
    pipe.run_all()
    return cfg, work, pipe


def _tree_digest(root: Path, skip=("run_manifest.json", ".lock")) -> dict[str, str]:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in skip:
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def test_pipeline_outputs_exist(micro_run):
    _, work, _ = micro_run
    for rel in ["corpus/manifest_train.tsv", "aug/manifest_aug_test.tsv",
                "kmeans/codebook.kmns", "units/clean_test.dedup.units",
                "denoiser/model.dnzr", "denoiser/train_log.tsv",
                "decode/hyp_test.dedup.units", "eval/report_denoised.txt",
                "eval/reduction.tsv", "run_manifest.json"]:
        assert (work / rel).exists(), rel


def test_two_fresh_runs_are_byte_identical(micro_run, tmp_path):
    # the second run uses worker threads: parallel maps must not change bytes
    cfg, work, _ = micro_run
    work2 = tmp_path / "again"
    Pipeline(load_config(MICRO), work2, threads=2).run_all()
    assert _tree_digest(work) == _tree_digest(work2)


def test_rerun_with_cache_leaves_outputs_untouched(micro_run):
    _, work, pipe = micro_run
    before = _tree_digest(work)
    pipe.run_all()  # every stage is fresh, so this is a no-op
    assert _tree_digest(work) == before


def test_stale_input_detection(micro_run, tmp_path):
    cfg, work, _ = micro_run
    work2 = tmp_path / "stale"
    shutil.copytree(work, work2)
    pipe = Pipeline(load_config(MICRO), work2)
    target = work2 / "kmeans" / "codebook.kmns"
    target.write_bytes(target.read_bytes() + b"x")
    with pytest.raises(StaleInputError, match="train_kmeans"):
        pipe.run_quantize()


def test_missing_upstream_is_stale(tmp_path):
    pipe = Pipeline(load_config(MICRO), tmp_path / "empty")
    with pytest.raises(StaleInputError, match="synth"):
        pipe.run_augment()


def test_eval_with_hyp_equal_ref_is_all_zero(micro_run, tmp_path):
    cfg, work, pipe = micro_run
    from unitdenoise import quantizer
    from unitdenoise.audio import read_manifest

    refs = {s.utt_id: s.units
            for s in quantizer.read_units(work / "units" / "clean_test.dedup.units")}
    rows = read_manifest(work / "aug" / "manifest_aug_test.tsv")
    hyps = [quantizer.UnitSequence(refs[r.source_utt_id], utt_id=r.id, deduplicated=True)
            for r in rows]
    hyp_path = tmp_path / "perfect.dedup.units"
    quantizer.write_units(hyps, hyp_path)
    pipe.run_eval(hyp_units_path=hyp_path)
    report = (work / "eval" / "report_denoised.tsv").read_text()
    for line in report.splitlines():
        name, uer = line.split("\t")[:2]
        assert float(uer) == 0.0, line


def test_report_includes_adaptation_series(micro_run):
    cfg, work, pipe = micro_run
    pipe.run_adapt()
    text = pipe.run_report()
    assert "UER" in text and "relative reduction" in text
    assert "recordings" in text  # the adaptation series table
    series = (work / "adapt" / "series.tsv").read_text().splitlines()
    assert len(series) == cfg.adapt.n_recordings + 1
    assert (work / "report" / "summary.txt").exists()


def test_layer_bound_codebook_guard(micro_run, tmp_path):
    cfg, work, _ = micro_run
    work2 = tmp_path / "guard"
    shutil.copytree(work, work2)
    other = load_config(MICRO)
    other.quantizer.layer_index = 2  # codebook on disk is bound to layer 1
    pipe = Pipeline(other, work2)
    from unitdenoise.pipeline import PipelineError
    with pytest.raises((PipelineError, StaleInputError)):
        pipe.run_quantize()


# --- CLI ------------------------------------------------------------------------

def _cli(*args):
    return subprocess.run([sys.executable, "-m", "unitdenoise.cli", *args],
                          capture_output=True, text=True)


def test_cli_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("quantizer.k = 4\n")  # no seed
    r = _cli("--config", str(bad), "--workdir", str(tmp_path / "w"), "synth")
    assert r.returncode == 2
    assert "config error" in r.stderr


def test_cli_stale_input_exit_code(tmp_path):
    r = _cli("--config", str(MICRO), "--workdir", str(tmp_path / "w"), "decode")
    assert r.returncode == 3
    assert "stale input" in r.stderr


def test_cli_stage_flow_and_idempotence(tmp_path):
    work = tmp_path / "w"
    for cmd in ("synth", "augment"):
        r = _cli("--config", str(MICRO), "--workdir", str(work), cmd)
        assert r.returncode == 0, r.stderr
    digest = _tree_digest(work)
    r = _cli("--config", str(MICRO), "--workdir", str(work), "augment")
    assert r.returncode == 0
    assert _tree_digest(work) == digest


def test_cli_lock_conflict(tmp_path):
    work = tmp_path / "w"
    work.mkdir()
    (work / ".lock").write_text("busy")
    r = _cli("--config", str(MICRO), "--workdir", str(work), "synth")
    assert r.returncode == 1
    assert "lock" in r.stderr.lower()


def test_cli_seed_override_changes_outputs(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _cli("--config", str(MICRO), "--workdir", str(a), "synth").returncode == 0
    r = _cli("--config", str(MICRO), "--workdir", str(b), "--seed-override", "99", "synth")
    assert r.returncode == 0
    assert _tree_digest(a) != _tree_digest(b)


def test_cli_unknown_ablation_variant(tmp_path):
    work = tmp_path / "w"
    r = _cli("--config", str(MICRO), "--workdir", str(work), "ablate",
             "--variants", "bogus")
    assert r.returncode in (1, 3)


def test_ablate_covers_decoder_only_and_adapter(micro_run):
    _, work, pipe = micro_run
    results = pipe.run_ablate(["decoder_only", "adapter_encoder_decoder"])
    assert set(results) == {"decoder_only", "adapter_encoder_decoder"}
    for uer in results.values():
        assert np.isfinite(uer) and uer >= 0.0
    report = (work / "ablate" / "report.tsv").read_text()
    assert "decoder_only" in report and "adapter_encoder_decoder" in report


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # the NaN is the point
def test_training_divergence_raises_numerical_error():
    from unitdenoise.denoiser import (DenoiserConfig, DenoiserModel, NumericalError,
                                      TrainingExample, train_denoiser)
    from unitdenoise.substrate import ScheduleConfig

    cfg = DenoiserConfig(encoder_layers=1, decoder_layers=1, model_dim=8, heads=2,
                         ffn_dim=12, dropout=0.0, num_units=3, input_dim=8,
                         num_feature_layers=3, seed=0)
    model = DenoiserModel(cfg)
    rng = np.random.default_rng(0)
    examples = [TrainingExample(f"u{i}", rng.standard_normal((3, 4, 8)), [0, 1])
                for i in range(4)]
    examples[2].stack[1, 2, 3] = np.nan  # corrupt features surface as exit-4 material
    with pytest.raises(NumericalError):
        train_denoiser(model, examples, [], epochs=1, batch_size=2,
                       schedule=ScheduleConfig(), seed=0)


def test_cli_numerical_failure_exit_code(tmp_path, monkeypatch):
    from unitdenoise import cli
    from unitdenoise.denoiser import NumericalError
    from unitdenoise.pipeline import Pipeline as RealPipeline

    def boom(self):
        raise NumericalError("loss went non-finite")

    monkeypatch.setattr(RealPipeline, "run_synth", boom)
    code = cli.main(["--config", str(MICRO), "--workdir", str(tmp_path / "w"), "synth"])
    assert code == 4
