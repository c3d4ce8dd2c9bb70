"""End-to-end experiment orchestration: corpus synthesis, augmentation,
feature extraction, clustering, denoiser training, decoding, evaluation,
test-time adaptation, and the architecture ablation.

Every stage is deterministic given the config seed, records content hashes of
its inputs and outputs in the run manifest, and refuses to run on stale
upstream artifacts.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import augment as aug
from . import denoiser as dn
from . import metrics, pseudo_ssl, quantizer
from .audio import Condition, ManifestRow, Waveform, read_manifest, read_wav, write_manifest, write_wav
from .config import PipelineConfig
from .substrate import ScheduleConfig


class PipelineError(Exception):
    pass


class StaleInputError(PipelineError):
    """Upstream stage outputs are missing or changed since they were recorded."""


def stage_seed(seed: int, k: int) -> int:
    return (seed * 1_000_003 + k) % (2 ** 31)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


SPLITS = ("train", "valid", "test")


class Pipeline:
    """Drives one working directory; stages must not run concurrently on it."""

    def __init__(self, config: PipelineConfig, workdir, threads: int = 1):
        config.validate()
        self.cfg = config
        self.workdir = Path(workdir)
        self.threads = max(1, threads)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self._manifest_path = self.workdir / "run_manifest.json"
        from .config import serialize_config
        self._config_hash = hashlib.sha256(
            serialize_config(config).encode()).hexdigest()

    # -- run manifest -------------------------------------------------------

    def _load_manifest(self) -> dict:
        if self._manifest_path.exists():
            return json.loads(self._manifest_path.read_text())
        return {}

    def _record_stage(self, name: str, inputs: dict[str, str], outputs: list[Path]):
        manifest = self._load_manifest()
        manifest[name] = {
            "config_hash": self._config_hash,
            "inputs": inputs,
            "outputs": {self._rel(p): _sha256(p) for p in outputs},
        }
        self._manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))

    def _rel(self, path: Path) -> str:
        path = Path(path)
        try:
            return str(path.relative_to(self.workdir))
        except ValueError:
            return str(path)

    def _abs(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.workdir / p

    def _require(self, stages: list[str]) -> dict[str, str]:
        """Verify upstream outputs still match their recorded hashes; the
        verified map becomes this stage's declared inputs."""
        manifest = self._load_manifest()
        inputs: dict[str, str] = {}
        for stage in stages:
            entry = manifest.get(stage)
            if entry is None:
                raise StaleInputError(f"stage '{stage}' has not been run")
            for rel, recorded in entry["outputs"].items():
                p = self._abs(rel)
                if not p.exists():
                    raise StaleInputError(f"stage '{stage}': missing output {rel}")
                current = _sha256(p)
                if current != recorded:
                    raise StaleInputError(f"stage '{stage}': {rel} changed on disk")
                inputs[rel] = current
        return inputs

    def _fresh(self, name: str, upstream: list[str]) -> bool:
        """Content-hash caching: true when the stage already ran with this
        config, its recorded inputs equal the current upstream outputs, and
        its own outputs are intact."""
        manifest = self._load_manifest()
        entry = manifest.get(name)
        if entry is None or entry["config_hash"] != self._config_hash:
            return False
        try:
            current_inputs = self._require(upstream)
        except StaleInputError:
            return False
        if entry["inputs"] != current_inputs:
            return False
        for rel, recorded in entry["outputs"].items():
            p = self._abs(rel)
            if not p.exists() or _sha256(p) != recorded:
                return False
        return True

    def _map(self, fn, items):
        if self.threads > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as ex:
                return list(ex.map(fn, items))
        return [fn(item) for item in items]


    def _write_manifest(self, rows, path: Path) -> None:
        """Manifests carry wav paths relative to their own location so two
        runs in different directories stay byte-identical."""
        path.parent.mkdir(parents=True, exist_ok=True)
        from dataclasses import replace as _replace
        rel = [_replace(r, wav_path=os.path.relpath(r.wav_path, path.parent))
               for r in rows]
        write_manifest(rel, path)

    def _read_manifest(self, path) -> list[ManifestRow]:
        rows = read_manifest(path)
        base = Path(path).parent
        for r in rows:
            if not os.path.isabs(r.wav_path):
                r.wav_path = os.path.normpath(str(base / r.wav_path))
        return rows

    # -- shared paths and objects --------------------------------------------

    def clean_manifest_path(self, split: str) -> Path:
        return self.workdir / "corpus" / f"manifest_{split}.tsv"

    def aug_manifest_path(self, split: str) -> Path:
        return self.workdir / "aug" / f"manifest_aug_{split}.tsv"

    def feats_dir(self, split: str) -> Path:
        return self.workdir / "feats" / split

    def units_path(self, name: str, dedup: bool = True) -> Path:
        suffix = ".dedup.units" if dedup else ".units"
        return self.workdir / "units" / f"{name}{suffix}"

    @property
    def codebook_path(self) -> Path:
        return self.workdir / "kmeans" / "codebook.kmns"

    @property
    def model_path(self) -> Path:
        return self.workdir / "denoiser" / "model.dnzr"

    @property
    def hyp_path(self) -> Path:
        return self.workdir / "decode" / "hyp_test.dedup.units"

    def ssl_config(self) -> pseudo_ssl.PseudoEncoderConfig:
        e = self.cfg.encoder
        return pseudo_ssl.PseudoEncoderConfig(
            num_layers=e.num_layers, dim=e.dim, n_mels=e.n_mels,
            window_ms=e.window_ms, hop_ms=e.hop_ms,
            seed=stage_seed(self.cfg.seed, 30),
        )

    def _ingested(self) -> bool:
        return self.cfg.paths.features_dir != "-"

    # -- stage: synth ---------------------------------------------------------

    def run_synth(self) -> None:
        if self._fresh("synth", []):
            return
        cfg = self.cfg
        outputs: list[Path] = []
        corpus_dir = self.workdir / "corpus"
        clean_dir = corpus_dir / "clean"

        if cfg.paths.clean_manifest != "-":
            rows = self._read_manifest(cfg.paths.clean_manifest)
            scripts = {}
        else:
            rows, scripts = aug.synth_corpus(
                cfg.corpus.num_utterances, cfg.corpus.num_unit_types,
                cfg.corpus.units_per_utterance,
                seed=stage_seed(cfg.seed, 10), out_dir=clean_dir,
            )
            outputs += [Path(r.wav_path) for r in rows]
            scripts_path = corpus_dir / "scripts.tsv"
            aug.write_scripts(scripts, scripts_path)
            outputs.append(scripts_path)

        n_test, n_valid = cfg.corpus.num_test, cfg.corpus.num_valid
        split_rows = {
            "train": rows[: len(rows) - n_valid - n_test],
            "valid": rows[len(rows) - n_valid - n_test: len(rows) - n_test],
            "test": rows[len(rows) - n_test:],
        }
        for split, srows in split_rows.items():
            path = self.clean_manifest_path(split)
            path.parent.mkdir(parents=True, exist_ok=True)
            self._write_manifest(srows, path)
            outputs.append(path)

        banks_dir = self.workdir / "banks"
        banks_dir.mkdir(parents=True, exist_ok=True)
        for role, seed_k, prefix in (("train", 11, "tr_"), ("test", 12, "te_")):
            bank = aug.synth_noise_bank(stage_seed(cfg.seed, seed_k), tag_prefix=prefix)
            for tag, wav in bank.sources.items():
                p = banks_dir / f"noise_{role}_{tag}.wav"
                write_wav(wav, p)
                outputs.append(p)
            irs = aug.synth_ir_bank(stage_seed(cfg.seed, seed_k + 3), tag_prefix=prefix)
            for ir in irs:
                p = banks_dir / f"ir_{role}_{ir.tag}.wav"
                write_wav(Waveform(ir.samples), p)
                outputs.append(p)

        self._record_stage("synth", {}, outputs)

    def _load_banks(self, role: str) -> tuple[aug.NoiseBank, list[aug.ImpulseResponse]]:
        banks_dir = self.workdir / "banks"
        sources = {}
        for p in sorted(banks_dir.glob(f"noise_{role}_*.wav")):
            tag = p.stem.removeprefix(f"noise_{role}_")
            sources[tag] = read_wav(p)
        irs = []
        for p in sorted(banks_dir.glob(f"ir_{role}_*.wav")):
            tag = p.stem.removeprefix(f"ir_{role}_")
            irs.append(aug.ImpulseResponse(read_wav(p).samples, tag=tag))
        if not sources or not irs:
            raise PipelineError(f"no {role} banks found in {banks_dir}")
        return aug.NoiseBank(sources=sources), irs

    # -- stage: augment --------------------------------------------------------

    def run_augment(self) -> None:
        if self._fresh("augment", ["synth"]):
            return
        cfg = self.cfg
        inputs = self._require(["synth"])
        outputs: list[Path] = []
        recipes = {
            "train": aug.TrainRecipe(rng_seed=stage_seed(cfg.seed, 20)),
            "valid": aug.TrainRecipe(rng_seed=stage_seed(cfg.seed, 21), keep_clean=False),
            "test": aug.TestRecipe(rng_seed=stage_seed(cfg.seed, 22)),
        }
        for split in SPLITS:
            role = "test" if split == "test" else "train"  # test noises unseen
            bank, irs = self._load_banks(role)
            rows = self._read_manifest(self.clean_manifest_path(split))
            out_dir = self.workdir / "aug" / split
            aug_rows = aug.augment_corpus(rows, recipes[split], bank, irs, out_dir)
            manifest_path = self.aug_manifest_path(split)
            manifest_path.parent.mkdir(parents=True, exist_ok=True)
            self._write_manifest(aug_rows, manifest_path)
            outputs.append(manifest_path)
            outputs += [Path(r.wav_path) for r in aug_rows]
        self._record_stage("augment", inputs, outputs)

    # -- stage: extract ----------------------------------------------------------

    def _extract_one(self, args) -> Path:
        wav_path, out_path = args
        feats = pseudo_ssl.extract_features(read_wav(wav_path), self.ssl_config())
        pseudo_ssl.dump_features(feats, out_path)
        return out_path

    def run_extract(self) -> None:
        if self._fresh("extract", ["synth", "augment"]):
            return
        inputs = self._require(["synth", "augment"])
        jobs: list[tuple[str, Path]] = []
        outputs: list[Path] = []

        groups = [("clean", [r for s in SPLITS
                             for r in self._read_manifest(self.clean_manifest_path(s))])]
        groups += [(s, self._read_manifest(self.aug_manifest_path(s))) for s in SPLITS]

        if self._ingested():
            feat_root = Path(self.cfg.paths.features_dir)
            for group, rows in groups:
                for r in rows:
                    p = feat_root / f"{r.id}.sslf"
                    if not p.exists():
                        raise PipelineError(f"ingested features missing for {r.id}")
                    pseudo_ssl.load_features(p)  # validates the format
                    outputs.append(p)
            self._record_stage("extract", inputs, outputs)
            return

        for group, rows in groups:
            out_dir = self.feats_dir(group)
            out_dir.mkdir(parents=True, exist_ok=True)
            for r in rows:
                jobs.append((r.wav_path, out_dir / f"{r.id}.sslf"))
        outputs = self._map(self._extract_one, jobs)
        self._record_stage("extract", inputs, outputs)

    def _features_of(self, group: str, utt_id: str) -> pseudo_ssl.LayerStackFeatures:
        if self._ingested():
            return pseudo_ssl.load_features(
                Path(self.cfg.paths.features_dir) / f"{utt_id}.sslf")
        return pseudo_ssl.load_features(self.feats_dir(group) / f"{utt_id}.sslf")

    # -- stage: train_kmeans -------------------------------------------------------

    def run_train_kmeans(self) -> None:
        if self._fresh("train_kmeans", ["synth", "extract"]):
            return
        cfg = self.cfg
        inputs = self._require(["synth", "extract"])
        layer = cfg.quantizer.layer_index
        pools = []
        for row in self._read_manifest(self.clean_manifest_path("train")):
            feats = self._features_of("clean", row.id)
            pools.append(pseudo_ssl.select_layer(feats, layer))
        frames = np.concatenate(pools, axis=0)
        rng = np.random.default_rng(stage_seed(cfg.seed, 40))
        subset = rng.choice(frames.shape[0],
                            size=max(cfg.quantizer.k,
                                     int(cfg.quantizer.subset_fraction * frames.shape[0])),
                            replace=False)
        codebook = quantizer.train_kmeans(
            frames[np.sort(subset)], cfg.quantizer.k,
            max_iters=cfg.quantizer.max_iters,
            seed=stage_seed(cfg.seed, 41), layer_index=layer)
        self.codebook_path.parent.mkdir(parents=True, exist_ok=True)
        quantizer.save_codebook(codebook, self.codebook_path)
        self._record_stage("train_kmeans", inputs, [self.codebook_path])

    def _assign_dedup(self, codebook, group: str, utt_id: str) -> quantizer.UnitSequence:
        feats = self._features_of(group, utt_id)
        layer = pseudo_ssl.select_layer(feats, codebook.layer_index)
        return quantizer.deduplicate(quantizer.assign(layer, codebook, utt_id=utt_id))

    def run_quantize(self) -> None:
        if self._fresh("quantize", ["synth", "augment", "train_kmeans", "extract"]):
            return
        cfg = self.cfg
        inputs = self._require(["synth", "augment", "train_kmeans", "extract"])
        codebook = quantizer.load_codebook(self.codebook_path)
        if codebook.layer_index != cfg.quantizer.layer_index:
            raise PipelineError(
                f"codebook is bound to layer {codebook.layer_index}, "
                f"config asks for layer {cfg.quantizer.layer_index}")
        outputs = []
        (self.workdir / "units").mkdir(parents=True, exist_ok=True)
        for split in SPLITS:
            raw_seqs = []
            for row in self._read_manifest(self.clean_manifest_path(split)):
                feats = self._features_of("clean", row.id)
                layer = pseudo_ssl.select_layer(feats, codebook.layer_index)
                raw_seqs.append(quantizer.assign(layer, codebook, utt_id=row.id))
            raw_path = self.units_path(f"clean_{split}", dedup=False)
            quantizer.write_units(raw_seqs, raw_path)
            dedup_path = self.units_path(f"clean_{split}")
            quantizer.write_units([quantizer.deduplicate(s) for s in raw_seqs], dedup_path)
            outputs += [raw_path, dedup_path]

        baseline = [self._assign_dedup(codebook, "test", row.id)
                    for row in self._read_manifest(self.aug_manifest_path("test"))]
        base_path = self.units_path("baseline_test")
        quantizer.write_units(baseline, base_path)
        outputs.append(base_path)
        self._record_stage("quantize", inputs, outputs)

    # -- stage: train_denoiser ------------------------------------------------------

    def _clean_units(self, split: str) -> dict[str, list[int]]:
        return {s.utt_id: s.units
                for s in quantizer.read_units(self.units_path(f"clean_{split}"))}

    def _examples(self, split: str) -> list[dn.TrainingExample]:
        targets = self._clean_units(split)
        examples = []
        for row in self._read_manifest(self.aug_manifest_path(split)):
            if row.source_utt_id not in targets:
                raise PipelineError(f"no clean-unit target for {row.id}")
            stack = self._features_of(split, row.id).layers
            examples.append(dn.TrainingExample(
                utt_id=row.id, stack=stack, target=targets[row.source_utt_id]))
        return examples

    def _denoiser_config(self, **overrides) -> dn.DenoiserConfig:
        cfg = self.cfg
        probe_row = self._read_manifest(self.clean_manifest_path("train"))[0]
        probe = self._features_of("clean", probe_row.id)
        base = dict(
            variant=cfg.denoiser.variant,
            encoder_kind=cfg.denoiser.encoder_kind,
            encoder_layers=cfg.denoiser.encoder_layers,
            decoder_layers=cfg.denoiser.decoder_layers,
            model_dim=cfg.denoiser.model_dim,
            heads=cfg.denoiser.heads,
            ffn_dim=cfg.denoiser.ffn_dim,
            ctc_train_weight=cfg.denoiser.ctc_train_weight,
            dropout=cfg.denoiser.dropout,
            num_units=cfg.quantizer.k,
            input_dim=probe.dim,
            num_feature_layers=probe.num_layers + 1,
            adapter_bottleneck=cfg.denoiser.adapter_bottleneck,
            seed=stage_seed(cfg.seed, 50),
        )
        base.update(overrides)
        return dn.DenoiserConfig(**base)

    def _train_ssl_config(self, variant: str):
        if variant != "adapter":
            return None
        if self._ingested():
            raise PipelineError(
                "the adapter variant must recompute the frozen feature stack; "
                "it cannot train from ingested feature dumps")
        return self.ssl_config()

    def _train_one(self, model: dn.DenoiserModel, log_path: Path | None = None) -> dn.TrainLog:
        cfg = self.cfg
        schedule = ScheduleConfig(peak_lr=cfg.train.peak_lr,
                                  warmup_steps=cfg.train.warmup_steps,
                                  decay=cfg.train.lr_decay)
        log = dn.train_denoiser(
            model, self._examples("train"), self._examples("valid"),
            epochs=cfg.train.epochs, batch_size=cfg.train.batch_size,
            schedule=schedule, seed=stage_seed(cfg.seed, 51),
            ssl_config=self._train_ssl_config(model.config.variant),
            valid_beam=cfg.train.valid_beam,
            valid_ctc_weight=cfg.decode.ctc_weight,
        )
        if log_path is not None:
            log_path.write_text("\n".join(log.lines()) + "\n")
        return log

    def run_train_denoiser(self) -> None:
        if self._fresh("train_denoiser", ["synth", "augment", "quantize", "extract"]):
            return
        inputs = self._require(["synth", "augment", "quantize", "extract"])
        model = dn.DenoiserModel(self._denoiser_config())
        self.model_path.parent.mkdir(parents=True, exist_ok=True)
        log_path = self.workdir / "denoiser" / "train_log.tsv"
        self._train_one(model, log_path)
        dn.save_model(model, self.model_path)
        self._record_stage("train_denoiser", inputs, [self.model_path, log_path])

    # -- stage: decode ---------------------------------------------------------------

    def _decode_rows(self, model, rows, group: str) -> list[quantizer.UnitSequence]:
        cfg = self.cfg
        ssl_cfg = self._train_ssl_config(model.config.variant)
        # a decoder-only model (pure attention training) has an untrained CTC
        # head, so its scores must stay out of the joint decode
        alpha = 0.0 if model.config.ctc_train_weight == 0.0 else cfg.decode.ctc_weight

        def one(row):
            stack = self._features_of(group, row.id).layers
            return dn.beam_search_decode(
                model, stack, beam_size=cfg.decode.beam_size,
                ctc_decode_weight=alpha, utt_id=row.id,
                ssl_config=ssl_cfg)

        return self._map(one, rows)

    def run_decode(self) -> None:
        if self._fresh("decode", ["train_denoiser", "augment", "extract"]):
            return
        inputs = self._require(["train_denoiser", "augment", "extract"])
        model = dn.load_model(self.model_path)
        rows = self._read_manifest(self.aug_manifest_path("test"))
        hyps = self._decode_rows(model, rows, "test")
        self.hyp_path.parent.mkdir(parents=True, exist_ok=True)
        quantizer.write_units(hyps, self.hyp_path)
        self._record_stage("decode", inputs, [self.hyp_path])

    # -- stage: eval -----------------------------------------------------------------

    def _report_for(self, hyp_units_path: Path) -> metrics.ConditionReport:
        hyps = {s.utt_id: s for s in quantizer.read_units(hyp_units_path)}
        refs = self._clean_units("test")
        pairs = []
        for row in self._read_manifest(self.aug_manifest_path("test")):
            ref = quantizer.UnitSequence(refs[row.source_utt_id],
                                         utt_id=row.source_utt_id, deduplicated=True)
            pairs.append((row.id, row.condition, hyps[row.id], ref))
        return metrics.condition_report(pairs)

    def run_eval(self, hyp_units_path: Path | None = None) -> None:
        if hyp_units_path is None and self._fresh("eval", ["decode", "quantize", "augment"]):
            return
        inputs = self._require(["decode", "quantize", "augment"])
        eval_dir = self.workdir / "eval"
        eval_dir.mkdir(parents=True, exist_ok=True)

        denoised = self._report_for(hyp_units_path or self.hyp_path)
        baseline = self._report_for(self.units_path("baseline_test"))

        outputs = []
        for name, report in (("denoised", denoised), ("baseline", baseline)):
            txt = eval_dir / f"report_{name}.txt"
            txt.write_text(report.render_table(f"{name} UER (%)") + "\n")
            tsv = eval_dir / f"report_{name}.tsv"
            tsv.write_text("\n".join(report.to_records()) + "\n")
            outputs += [txt, tsv]

        red_path = eval_dir / "reduction.tsv"
        red_path.write_text("\n".join(self._reduction_lines(baseline, denoised)) + "\n")
        outputs.append(red_path)
        self._record_stage("eval", inputs, outputs)

    @staticmethod
    def _reduction_lines(baseline: metrics.ConditionReport,
                         denoised: metrics.ConditionReport) -> list[str]:
        lines = ["bucket\tbaseline_uer\tdenoised_uer\trelative_reduction"]

        def entry(name, b_err, b_ref, d_err, d_ref):
            b_uer = 100.0 * b_err / b_ref if b_ref else float("nan")
            d_uer = 100.0 * d_err / d_ref if d_ref else float("nan")
            rel = (b_uer - d_uer) / b_uer if b_uer > 0 else float("nan")
            lines.append(f"{name}\t{b_uer:.4f}\t{d_uer:.4f}\t{rel:.4f}")

        for name in metrics.BUCKETS:
            b = baseline.buckets[name]
            d = denoised.buckets[name]
            entry(name, b.errors, b.ref_units, d.errors, d.ref_units)
        bn = [baseline.buckets[n] for n in ("noise_h", "noise_l")]
        dnb = [denoised.buckets[n] for n in ("noise_h", "noise_l")]
        entry("noise_pooled",
              sum(x.errors for x in bn), sum(x.ref_units for x in bn),
              sum(x.errors for x in dnb), sum(x.ref_units for x in dnb))
        return lines

    # -- stage: adapt ----------------------------------------------------------------

    def _environment_signal(self, total_s: float) -> Waveform:
        """One long recording from the adaptation target environment."""
        env = self.cfg.adapt.environment
        bank = aug.synth_noise_bank(stage_seed(self.cfg.seed, 60),
                                    duration_s=total_s, tag_prefix="env_")
        return bank.sources[f"env_{env}"]

    def run_adapt(self) -> None:
        if self._fresh("adapt", ["train_denoiser", "synth", "quantize"]):
            return
        cfg = self.cfg
        if self._ingested():
            raise PipelineError("adaptation needs the feature encoder; "
                                "ingested-features mode cannot extract new mixtures")
        inputs = self._require(["train_denoiser", "synth", "quantize"])
        ad = cfg.adapt
        sr = 16000
        rec_len = int(ad.recording_len_s * sr)
        eval_len = rec_len * 2
        signal = self._environment_signal(
            ad.n_recordings * ad.recording_len_s + 2 * ad.recording_len_s + 1.0)

        adapt_dir = self.workdir / "adapt"
        adapt_dir.mkdir(parents=True, exist_ok=True)
        outputs = []

        recordings = []
        for r in range(ad.n_recordings):
            rec = Waveform(signal.samples[r * rec_len:(r + 1) * rec_len])
            recordings.append(rec)
            p = adapt_dir / f"recording_{r}.wav"
            write_wav(rec, p)
            outputs.append(p)
        eval_noise = Waveform(signal.samples[ad.n_recordings * rec_len:
                                             ad.n_recordings * rec_len + eval_len])

        ssl_cfg = self.ssl_config()
        train_targets = self._clean_units("train")
        train_rows = self._read_manifest(self.clean_manifest_path("train"))

        def mixture_examples(rec_index: int) -> list[dn.TrainingExample]:
            rng = np.random.default_rng([stage_seed(cfg.seed, 61), rec_index])
            examples = []
            for j in range(ad.utterances_per_recording):
                row = train_rows[int(rng.integers(0, len(train_rows)))]
                clean = read_wav(row.wav_path)
                snr = float(rng.uniform(ad.snr_low_db, ad.snr_high_db))
                mix = aug.mix_at_snr(clean, recordings[rec_index], snr, rng)
                stack = pseudo_ssl.extract_features(mix.waveform, ssl_cfg).layers
                examples.append(dn.TrainingExample(
                    utt_id=f"adapt_r{rec_index}_{j}", stack=stack,
                    target=train_targets[row.id]))
            return examples

        test_targets = self._clean_units("test")
        test_rows = self._read_manifest(self.clean_manifest_path("test"))
        eval_rng = np.random.default_rng(stage_seed(cfg.seed, 63))
        eval_pairs = []
        for row in test_rows:
            clean = read_wav(row.wav_path)
            mix = aug.mix_at_snr(clean, eval_noise, ad.eval_snr_db, eval_rng)
            stack = pseudo_ssl.extract_features(mix.waveform, ssl_cfg).layers
            eval_pairs.append((stack, test_targets[row.id]))

        base = dn.load_model(self.model_path)
        model_ssl_cfg = self._train_ssl_config(base.config.variant)

        def eval_uer(model) -> float:
            def one(pair):
                stack, _ = pair
                return dn.beam_search_decode(
                    model, stack, beam_size=cfg.decode.beam_size,
                    ctc_decode_weight=cfg.decode.ctc_weight,
                    ssl_config=model_ssl_cfg)

            hyps = self._map(one, eval_pairs)
            errors = refs = 0
            for hyp, (_, target) in zip(hyps, eval_pairs):
                counts = metrics.edit_distance(hyp.units, target)
                errors += counts.total_errors
                refs += counts.ref_length
            return 100.0 * errors / max(refs, 1)

        pool: list[dn.TrainingExample] = []
        series = [(0, eval_uer(base))]
        for n in range(1, ad.n_recordings + 1):
            pool += mixture_examples(n - 1)
            adapted = dn.finetune_encoder(
                base, pool, steps=ad.steps, lr=ad.lr,
                seed=stage_seed(cfg.seed, 62), ssl_config=model_ssl_cfg)
            series.append((n, eval_uer(adapted)))

        series_path = adapt_dir / "series.tsv"
        series_path.write_text(
            "\n".join(f"{n}\t{u:.4f}" for n, u in series) + "\n")
        outputs.append(series_path)
        report_path = adapt_dir / "report.txt"
        report_path.write_text(self._adapt_table(series))
        outputs.append(report_path)
        self._record_stage("adapt", inputs, outputs)

    def _adapt_table(self, series) -> str:
        ad = self.cfg.adapt
        lines = [
            f"test-time adaptation: environment={ad.environment} "
            f"eval SNR={ad.eval_snr_db:g} dB "
            f"({ad.utterances_per_recording} mixtures per {ad.recording_len_s:g}s recording)",
            "recordings\tUER(%)",
        ]
        lines += [f"{n}\t{u:.2f}" for n, u in series]
        return "\n".join(lines) + "\n"

    # -- stage: ablate ---------------------------------------------------------------

    ABLATION_VARIANTS = ("encoder_only", "decoder_only", "encoder_decoder",
                         "adapter_encoder_decoder")

    def _variant_config(self, variant: str) -> dn.DenoiserConfig:
        if variant == "encoder_only":
            return self._denoiser_config(variant="external", encoder_kind="transformer",
                                         decoder_layers=0, ctc_train_weight=1.0)
        if variant == "decoder_only":
            return self._denoiser_config(variant="external", encoder_kind="none",
                                         ctc_train_weight=0.0)
        if variant == "encoder_decoder":
            return self._denoiser_config(variant="external")
        if variant == "adapter_encoder_decoder":
            return self._denoiser_config(variant="adapter")
        raise PipelineError(f"unknown ablation variant: {variant}")

    def run_ablate(self, variants: list[str]) -> dict[str, float]:
        for v in variants:
            if v not in self.ABLATION_VARIANTS:
                raise PipelineError(f"unknown ablation variant: {v}")
        inputs = self._require(["synth", "augment", "quantize", "extract"])
        ablate_dir = self.workdir / "ablate"
        ablate_dir.mkdir(parents=True, exist_ok=True)
        rows = self._read_manifest(self.aug_manifest_path("test"))
        results: dict[str, float] = {}
        outputs = []
        for variant in variants:
            model = dn.DenoiserModel(self._variant_config(variant))
            self._train_one(model)
            model_path = ablate_dir / f"model_{variant}.dnzr"
            dn.save_model(model, model_path)
            outputs.append(model_path)
            hyps = self._decode_rows(model, rows, "test")
            hyp_path = ablate_dir / f"hyp_{variant}.dedup.units"
            quantizer.write_units(hyps, hyp_path)
            outputs.append(hyp_path)
            report = self._report_for(hyp_path)
            results[variant] = report.overall_uer

        table = ["variant\toverall_uer"]
        table += [f"{v}\t{results[v]:.4f}" for v in variants]
        report_path = ablate_dir / "report.tsv"
        report_path.write_text("\n".join(table) + "\n")
        outputs.append(report_path)
        self._record_stage("ablate", inputs, outputs)
        return results

    # -- stage: report ---------------------------------------------------------------

    def run_report(self) -> str:
        self._require(["eval"])
        eval_dir = self.workdir / "eval"
        parts = [
            (eval_dir / "report_baseline.txt").read_text(),
            (eval_dir / "report_denoised.txt").read_text(),
            "relative reduction (baseline -> denoised)",
            (eval_dir / "reduction.tsv").read_text(),
        ]
        adapt_report = self.workdir / "adapt" / "report.txt"
        if adapt_report.exists():
            parts.append(adapt_report.read_text())
        ablate_report = self.workdir / "ablate" / "report.tsv"
        if ablate_report.exists():
            parts.append("ablation\n" + ablate_report.read_text())
        text = "\n".join(parts)
        report_dir = self.workdir / "report"
        report_dir.mkdir(parents=True, exist_ok=True)
        (report_dir / "summary.txt").write_text(text)
        return text

    # -- everything ------------------------------------------------------------------

    def run_all(self) -> None:
        self.run_synth()
        self.run_augment()
        self.run_extract()
        self.run_train_kmeans()
        self.run_quantize()
        self.run_train_denoiser()
        self.run_decode()
        self.run_eval()
