"""Experiment configuration, content-addressed stage cache and the stage DAG.

Stages form the DAG

    train_split -> {train_adversary, gen_delta} -> train_protection
                -> {eval_inference, eval_reconstruction} -> report

Every artifact lives under ``<cache>/<stage>/<key>`` where ``key`` hashes the
stage name, the slice of the config the stage reads, and the keys of its
upstream artifacts. Artifacts are written to a temporary directory and renamed
into place, so readers never see a half-written stage.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import os
import shutil
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import yaml
from PIL import Image

from . import attacks as A
from . import cam as C
from . import data as D
from . import delta as DL
from . import metrics as MT
from . import models as M
from . import protection as P

log = logging.getLogger(__name__)

STAGES = (
    "train_split",
    "train_adversary",
    "gen_delta",
    "train_protection",
    "eval_inference",
    "eval_reconstruction",
    "report",
)
PROTECTIONS = ("adp_ae", "pca")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class StageError(RuntimeError):
    """A stage failed while running."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DataConfig:
    synthetic: bool = True
    corpus_dir: str = ""  # image directory of a real corpus
    attributes_csv: str = ""
    corpus_size: int = 2400  # synthetic images generated
    primary_attribute: str = "stripes"
    sensitive_attribute: str = "blob_red"
    n_train: int = 400
    n_test: int = 200
    n_adversary_train: int = 400
    n_adversary_test: int = 200
    n_delta: int = 400


@dataclass
class ModelConfig:
    family: str = "micro"
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 0.0


@dataclass
class AdversaryConfig:
    offline_arch: str = "split"
    inference_arch: str = "split"
    epochs: int = 10
    lr: float = 1e-3


@dataclass
class DeltaSection:
    strategy: str = "delta_min"
    method: str = "black_out"
    iterations: int = 2
    # a 99% "blue" rule on a jet-rendered CAM corresponds to heat ~0.344
    threshold: float = 0.35
    blur_intensity: float = 40.0


@dataclass
class ProtectionConfig:
    kind: str = "adp_ae"
    ae_variant: str = "decreasing"
    epochs: int = 30
    lr: float = 1e-2
    batch_size: int = 32
    pca_k_max: int = 400
    pca_k_apply: int = 0  # 0 -> all fitted components
    pca_ks: list = field(default_factory=list)  # empty -> log-spaced sweep


@dataclass
class ReconstructionSection:
    iterations: int = 1500
    step_size: float = 0.05
    tv_weight: float = 1e-3
    init: str = "noise"
    image_indices: list = field(default_factory=lambda: [0, 1, 2])


@dataclass
class ThresholdConfig:
    eps_s: float = 0.05
    eps_a: float = 0.20
    eps_gap: float = 0.10


@dataclass
class MatrixConfig:
    strategies: list = field(default_factory=list)
    methods: list = field(default_factory=list)
    splits: list = field(default_factory=list)
    archs: list = field(default_factory=list)  # offline adversary architecture
    protections: list = field(default_factory=list)


SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "adversary": AdversaryConfig,
    "delta": DeltaSection,
    "protection": ProtectionConfig,
    "reconstruction": ReconstructionSection,
    "thresholds": ThresholdConfig,
    "matrix": MatrixConfig,
}


@dataclass
class ExperimentConfig:
    name: str = "desk"
    seed: int = 0
    splits: list = field(default_factory=lambda: ["c2"])
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    adversary: AdversaryConfig = field(default_factory=AdversaryConfig)
    delta: DeltaSection = field(default_factory=DeltaSection)
    protection: ProtectionConfig = field(default_factory=ProtectionConfig)
    reconstruction: ReconstructionSection = field(default_factory=ReconstructionSection)
    thresholds: ThresholdConfig = field(default_factory=ThresholdConfig)
    matrix: MatrixConfig = field(default_factory=MatrixConfig)

    # derived seeds: offline and inference adversaries never share one
    @property
    def seeds(self) -> dict[str, int]:
        s = self.seed
        return {
            "corpus": s,
            "model": s,
            "primary_sample": s + 1,
            "sensitive_sample": s + 2,
            "delta_sample": s + 3,
            "offline": s + 11,
            "inference": s + 12,
            "protection": s,
            "reconstruction": s,
        }

    def to_dict(self) -> dict:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def digest(self) -> str:
        return stable_hash(self.to_dict())

    @classmethod
    def from_dict(cls, raw: dict | None) -> "ExperimentConfig":
        raw = dict(raw or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs: dict[str, Any] = {}
        for name, value in raw.items():
            if name in SECTIONS:
                kwargs[name] = _section(SECTIONS[name], value, name)
            else:
                kwargs[name] = value
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not isinstance(self.splits, list) or not self.splits:
            raise ConfigError("splits must be a non-empty list")
        if self.protection.kind not in PROTECTIONS:
            raise ConfigError(f"protection.kind must be one of {PROTECTIONS}")
        if self.protection.ae_variant not in P.AE_FACTORS:
            raise ConfigError(f"protection.ae_variant must be one of {sorted(P.AE_FACTORS)}")
        for arch in (self.adversary.offline_arch, self.adversary.inference_arch):
            if arch not in A.ARCHITECTURES:
                raise ConfigError(f"adversary architecture must be one of {A.ARCHITECTURES}")
        if self.model.family not in M.FAMILIES:
            raise ConfigError(f"model.family must be one of {M.FAMILIES}")
        try:
            self.delta_config("")
            self.reconstruction_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not self.data.synthetic and not (self.data.corpus_dir and self.data.attributes_csv):
            raise ConfigError("a real corpus needs data.corpus_dir and data.attributes_csv")

    def delta_config(self, split: str) -> DL.DeltaConfig:
        return DL.DeltaConfig(**asdict(self.delta), split_position=split)

    def reconstruction_config(self) -> A.ReconstructionConfig:
        r = self.reconstruction
        return A.ReconstructionConfig(r.iterations, r.step_size, r.tv_weight, r.init, self.seeds["reconstruction"])

    def thresholds_obj(self) -> MT.Thresholds:
        t = self.thresholds
        return MT.Thresholds(t.eps_s, t.eps_a, t.eps_gap)

    def with_overrides(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``{"protection.epochs": 5}``."""
        d = self.to_dict()
        for path, value in changes.items():
            node = d
            *parents, leaf = path.replace("__", ".").split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config key {path!r}")
            node[leaf] = value
        return ExperimentConfig.from_dict(d)


def _section(cls, value, name):
    if isinstance(value, cls):
        return value
    if not isinstance(value, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(value) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return cls(**value)


def load_config(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        return ExperimentConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def stable_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# artifact store


@dataclass
class StageArtifact:
    stage: str
    input_hash: str
    path: Path
    created: float = 0.0
    finished: float = 0.0
    cache_hit: bool = False
    meta: dict = field(default_factory=dict)

    def file(self, name: str) -> Path:
        return self.path / name


class ArtifactStore:
    """Write-once directory store keyed by ``(stage, input hash)``."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, stage: str, key: str) -> Path:
        return self.root / stage / key

    def get(self, stage: str, key: str) -> StageArtifact | None:
        p = self.path(stage, key)
        info = p / "artifact.json"
        if not info.exists():
            return None
        rec = json.loads(info.read_text())
        return StageArtifact(stage, key, p, rec["created"], rec["finished"], True, rec.get("meta", {}))

    def put(self, stage: str, key: str, inputs: dict, build, force: bool = False) -> StageArtifact:
        """Run ``build(tmpdir) -> meta`` and publish the directory atomically."""
        final = self.path(stage, key)
        final.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=f".{key}-", dir=final.parent))
        created = time.time()
        try:
            meta = build(tmp) or {}
            finished = time.time()
            record = {"stage": stage, "input_hash": key, "inputs": inputs, "created": created, "finished": finished, "meta": meta}
            (tmp / "artifact.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str))
            if final.exists():
                if not force:  # another writer won the race; keep theirs
                    shutil.rmtree(tmp)
                    return self.get(stage, key)
                trash = final.with_name(f".{key}-old-{os.getpid()}")
                os.replace(final, trash)
                os.replace(tmp, final)
                shutil.rmtree(trash, ignore_errors=True)
            else:
                os.replace(tmp, final)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        return StageArtifact(stage, key, final, created, finished, False, meta)

    def entries(self) -> list[dict]:
        """Every published artifact, read from its ``artifact.json``."""
        out = []
        for info in sorted(self.root.glob("*/*/artifact.json")):
            rec = json.loads(info.read_text())
            out.append({k: rec[k] for k in ("stage", "input_hash", "created", "finished")} | {"path": str(info.parent)})
        return out

    def write_index(self) -> Path:
        # rebuilt from a scan rather than appended to, so concurrent writers never contend on it
        path = self.root / "index.json"
        tmp = path.with_name(f".index-{os.getpid()}.json")
        tmp.write_text(json.dumps(self.entries(), indent=1, sort_keys=True))
        os.replace(tmp, path)
        return path


# ---------------------------------------------------------------------------
# pipeline


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and not np.isfinite(v)):
        return ""
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            values = [r.get(h) for h in header] if isinstance(r, dict) else r
            w.writerow([_fmt(v) for v in values])


def _read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _save_png(img: torch.Tensor, path) -> None:
    arr = (img.detach().clamp(0, 1).permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def _load_png(path) -> torch.Tensor:
    return torch.from_numpy(np.array(Image.open(path).convert("RGB"))).permute(2, 0, 1).float().div(255.0)


class Pipeline:
    """Runs stages for one :class:`ExperimentConfig` against an artifact store."""

    def __init__(self, config: ExperimentConfig, cache_dir, force=(), dump_heatmaps: bool = False):
        self.config = config
        self.store = ArtifactStore(cache_dir)
        self.force = set(STAGES) if force is True else set(force or ())
        self.dump_heatmaps = dump_heatmaps
        self._memo: dict = {}
        self.events: list[tuple[str, str, bool]] = []  # (stage, key, cache_hit)

    # -- data ---------------------------------------------------------------
    def corpus(self) -> D.Corpus:
        if "corpus" not in self._memo:
            d = self.config.data
            if d.synthetic:
                spec = D.SyntheticSpec(seed=self.config.seeds["corpus"])
                self._memo["corpus"] = D.synth_generate(spec, d.corpus_size)
            else:
                self._memo["corpus"] = D.load_corpus(d.corpus_dir, d.attributes_csv)
        return self._memo["corpus"]

    def primary_sets(self):
        if "primary" not in self._memo:
            d = self.config.data
            self._memo["primary"] = D.sample_balanced(
                self.corpus(), d.primary_attribute, d.n_train, d.n_test, self.config.seeds["primary_sample"]
            )
        return self._memo["primary"]

    def sensitive_sets(self):
        if "sensitive" not in self._memo:
            d = self.config.data
            _, test = self.primary_sets()
            self._memo["sensitive"] = D.sample_balanced(
                self.corpus(),
                d.sensitive_attribute,
                d.n_adversary_train,
                d.n_adversary_test,
                self.config.seeds["sensitive_sample"],
                role="sensitive",
                exclude=test.ids,
            )
        return self._memo["sensitive"]

    def delta_set(self):
        if "delta" not in self._memo:
            d = self.config.data
            held_out = self.primary_sets()[1].ids + self.sensitive_sets()[1].ids
            self._memo["delta"] = D.build_delta_dataset(
                self.corpus(),
                [d.primary_attribute, d.sensitive_attribute],
                d.n_delta,
                self.config.seeds["delta_sample"],
                exclude=held_out,
            )
        return self._memo["delta"]

    # -- keys ---------------------------------------------------------------
    def _corpus_scope(self) -> dict:
        d = self.config.data
        return {
            "synthetic": d.synthetic,
            "corpus_dir": d.corpus_dir,
            "attributes_csv": d.attributes_csv,
            "corpus_size": d.corpus_size,
            "corpus_seed": self.config.seeds["corpus"],
            "spec": stable_hash(asdict(D.SyntheticSpec(seed=self.config.seeds["corpus"]))) if d.synthetic else "",
        }

    def _inputs(self, stage: str, split: str = "", role: str = "") -> dict:
        cfg, d = self.config, self.config.data
        if stage == "train_split":
            return {
                "corpus": self._corpus_scope(),
                "primary": [d.primary_attribute, d.n_train, d.n_test, cfg.seeds["primary_sample"]],
                "model": asdict(cfg.model),
                "seed": cfg.seeds["model"],
            }
        if stage == "train_adversary":
            arch = cfg.adversary.offline_arch if role == "offline" else cfg.adversary.inference_arch
            return {
                "up": [self.key("train_split")],
                "split": split,
                "role": role,
                "arch": arch,
                "sensitive": [d.sensitive_attribute, d.n_adversary_train, d.n_adversary_test, cfg.seeds["sensitive_sample"]],
                "epochs": cfg.adversary.epochs,
                "lr": cfg.adversary.lr,
                "seed": cfg.seeds[role],
            }
        if stage == "gen_delta":
            up = [self.key("train_split")]
            if cfg.delta.strategy == "delta_min":
                up.append(self.key("train_adversary", split, "offline"))
            return {
                "up": up,
                "split": split,
                "delta": asdict(cfg.delta),
                "sample": [d.primary_attribute, d.sensitive_attribute, d.n_delta, cfg.seeds["delta_sample"]],
            }
        if stage == "train_protection":
            p = cfg.protection
            if p.kind == "pca":
                return {"up": [self.key("train_split")], "split": split, "kind": "pca", "k_max": p.pca_k_max}
            return {
                "up": [self.key("gen_delta", split)],
                "split": split,
                "kind": p.kind,
                "variant": p.ae_variant,
                "epochs": p.epochs,
                "lr": p.lr,
                "batch_size": p.batch_size,
                "seed": cfg.seeds["protection"],
            }
        if stage == "eval_inference":
            up = [self.key("train_protection", split), self.key("train_adversary", split, "inference")]
            if self._uses_offline():
                up.append(self.key("train_adversary", split, "offline"))
            scope = {"up": up, "split": split, "thresholds": asdict(cfg.thresholds), "labels": self._labels(split)}
            if cfg.protection.kind == "pca":
                scope["pca"] = [cfg.protection.pca_k_apply, list(cfg.protection.pca_ks)]
            return scope
        if stage == "eval_reconstruction":
            return {
                "up": [self.key("train_protection", split)],
                "split": split,
                "reconstruction": asdict(cfg.reconstruction),
                "seed": cfg.seeds["reconstruction"],
                "labels": self._labels(split),
            }
        if stage == "report":
            return {
                "up": [self.key(s, sp) for sp in cfg.splits for s in ("eval_inference", "eval_reconstruction")],
                "name": cfg.name,
            }
        raise ConfigError(f"unknown stage {stage!r}")

    def _uses_offline(self) -> bool:
        return self.config.protection.kind == "adp_ae" and self.config.delta.strategy == "delta_min"

    def _labels(self, split: str) -> dict:
        cfg = self.config
        kind = cfg.protection.kind
        return {
            "protection": kind if kind == "pca" else f"{kind}:{cfg.protection.ae_variant}",
            "strategy": cfg.delta.strategy if kind == "adp_ae" else "-",
            "method": cfg.delta.method if kind == "adp_ae" else "-",
            "arch": cfg.adversary.offline_arch if self._uses_offline() else "-",
            "inference_arch": cfg.adversary.inference_arch,
        }

    def key(self, stage: str, split: str = "", role: str = "") -> str:
        return stable_hash({"stage": stage, "inputs": self._inputs(stage, split, role)})

    # -- running ------------------------------------------------------------
    def run(self, stage: str, split: str = "", role: str = "") -> StageArtifact:
        """Build ``stage`` (and any missing upstream stage); cache hits are free."""
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
        split = split or (self.config.splits[0] if stage not in ("train_split", "report") else "")
        if stage == "train_adversary" and role not in A.ROLES:
            raise ConfigError(f"train_adversary needs a role in {A.ROLES}")
        inputs = self._inputs(stage, split, role)
        key = stable_hash({"stage": stage, "inputs": inputs})
        force = stage in self.force
        if not force:
            hit = self.store.get(stage, key)
            if hit is not None:
                self.events.append((stage, key, True))
                return hit
        builder = getattr(self, f"_build_{stage}")
        log.info("building %s %s %s (%s)", stage, split, role, key)
        try:
            art = self.store.put(stage, key, inputs, lambda out: builder(out, split, role), force=force)
        except (ConfigError, M.ConfigError, P.UnsupportedLayer, A.AdversaryInfeasible):
            raise
        except Exception as exc:
            raise StageError(f"stage {stage} failed: {exc}") from exc
        self.store.write_index()
        self.events.append((stage, key, art.cache_hit))
        return art

    def run_all(self) -> StageArtifact:
        return self.run("report")

    # -- loaders ------------------------------------------------------------
    def split_model(self, split: str) -> M.SplitModel:
        k = ("split_model", split)
        if k not in self._memo:
            art = self.run("train_split")
            model = M.load_checkpoint(art.file("model.pt"))
            self._memo[k] = M.split(model, split)
        return self._memo[k]

    def feature_shape(self, split: str) -> tuple[int, int, int]:
        sm = self.split_model(split)
        with torch.no_grad():
            return tuple(sm.client(torch.zeros((1,) + tuple(sm.input_shape))).shape[1:])

    def adversary(self, split: str, role: str) -> M.Chain:
        k = ("adversary", split, role)
        if k not in self._memo:
            art = self.run("train_adversary", split, role)
            blob = torch.load(art.file("adversary.pt"), weights_only=False)
            head = A.make_adversary(
                self.split_model(split), self.config.model.family, blob["arch"], tuple(blob["feature_shape"]), seed=blob["seed"]
            )
            head.load_state_dict(blob["state_dict"])
            self._memo[k] = head.eval()
        return self._memo[k]

    def delta_pairs(self, split: str) -> tuple[torch.Tensor, torch.Tensor]:
        art = self.run("gen_delta", split)
        manifest = json.loads(art.file("manifest.json").read_text())
        orig = torch.stack([_load_png(art.path / "pairs" / r["original"]) for r in manifest["pairs"]])
        prot = torch.stack([_load_png(art.path / "pairs" / r["protected"]) for r in manifest["pairs"]])
        return orig, prot

    def plugin(self, split: str) -> P.ProtectionPlugin:
        return P.load_plugin(self.run("train_protection", split).file("plugin.pt"))

    # -- stage builders -----------------------------------------------------
    def _build_train_split(self, out: Path, split: str, role: str) -> dict:
        cfg = self.config
        train, test = self.primary_sets()
        shape = tuple(train.images.shape[1:])
        model = M.build_model(cfg.model.family, 2, cfg.seeds["model"], shape)
        res = M.train_classifier(
            model, train.xy, test.xy, cfg.model.epochs, cfg.model.lr, cfg.model.batch_size, cfg.model.weight_decay, cfg.seeds["model"]
        )
        M.save_checkpoint(model, out / "model.pt", stable_hash(asdict(cfg.model)))
        M.write_trace_csv(res.trace, out / "trace.csv", "server")
        return {"best_acc": res.best_acc, "best_epoch": res.best_epoch}

    def _build_train_adversary(self, out: Path, split: str, role: str) -> dict:
        cfg = self.config
        arch = cfg.adversary.offline_arch if role == "offline" else cfg.adversary.inference_arch
        sm = self.split_model(split)
        shape = self.feature_shape(split)
        seed = cfg.seeds[role]
        head = A.make_adversary(sm, cfg.model.family, arch, shape, seed=seed)
        train, test = self.sensitive_sets()
        res = A.train_adversary(head, sm.client, train.xy, test.xy, cfg.adversary.epochs, seed, cfg.adversary.lr)
        torch.save(
            {"arch": arch, "role": role, "feature_shape": shape, "seed": seed, "state_dict": head.state_dict()},
            out / "adversary.pt",
        )
        M.write_trace_csv(res.trace, out / "trace.csv", split)
        return {"best_acc": res.best_acc, "best_epoch": res.best_epoch, "arch": arch, "role": role}

    def _build_gen_delta(self, out: Path, split: str, role: str) -> dict:
        cfg = self.config
        sm = self.split_model(split)
        offline = self.adversary(split, "offline") if cfg.delta.strategy == "delta_min" else None
        ds = self.delta_set()
        dcfg = cfg.delta_config(split)
        batch = DL.run_delta_batch(ds.images, sm, offline, dcfg)
        (out / "pairs").mkdir()
        records = []
        for k, ident in enumerate(ds.ids):
            stem = Path(ident).stem
            _save_png(batch.original[k], out / "pairs" / f"{stem}_o.png")
            _save_png(batch.protected[k], out / "pairs" / f"{stem}_p.png")
            cumulative = np.logical_or.accumulate(batch.masks[:, k], axis=0)
            records.append(
                {
                    "id": ident,
                    "original": f"{stem}_o.png",
                    "protected": f"{stem}_p.png",
                    "coverage": [round(float(m.mean()), 6) for m in cumulative],
                }
            )
        manifest = {"config_hash": stable_hash(dcfg.to_dict()), "delta": dcfg.to_dict(), "pairs": records}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        if self.dump_heatmaps:
            self._dump_heatmaps(ds.images[:8], sm, offline, split)
        cov = np.array([r["coverage"][-1] for r in records])
        return {"n": len(records), "mean_coverage": float(cov.mean())}

    def _dump_heatmaps(self, images, sm, offline, split) -> None:
        dest = self.store.root / "heatmaps" / split
        dest.mkdir(parents=True, exist_ok=True)
        paths = {"server": sm.client + sm.server}
        if offline is not None:
            paths["offline"] = sm.client + offline
        for name, comp in paths.items():
            maps, targets, zero = C.cam_batch(images, comp)
            for k in range(len(images)):
                h = C.Heatmap(maps[k], int(targets[k]), name, bool(zero[k]))
                C.save_heatmap_png(h, dest / f"{k:02d}_{name}.png")
                C.save_heatmap_png(h, dest / f"{k:02d}_{name}_overlay.png", images[k])

    def _build_train_protection(self, out: Path, split: str, role: str) -> dict:
        cfg, p = self.config, self.config.protection
        sm = self.split_model(split)
        if p.kind == "pca":
            train, _ = self.primary_sets()
            with torch.no_grad():
                maps = sm.client(train.images)
            plugin = P.fit_pca(maps, p.pca_k_max, split)
            P.save_plugin(plugin, out / "plugin.pt", {"k_max": p.pca_k_max})
            _write_csv(
                out / "explained_variance.csv",
                ["component", "ratio"],
                [[i + 1, float(r)] for i, r in enumerate(plugin.explained_variance_ratio())],
            )
            return {"k_max": plugin.k_max}
        orig, prot = self.delta_pairs(split)
        with torch.no_grad():
            f_o, f_p = sm.client(orig), sm.client(prot)
        snapshots = []
        plugin = P.train_adp(
            f_o,
            f_p,
            p.ae_variant,
            p.epochs,
            split,
            p.lr,
            p.batch_size,
            cfg.seeds["protection"],
            on_epoch=lambda e, pl: snapshots.append(copy.deepcopy(pl.net.state_dict())),
        )
        P.save_plugin(plugin, out / "plugin.pt", {k: getattr(p, k) for k in ("ae_variant", "epochs", "lr", "batch_size")})
        torch.save(snapshots, out / "snapshots.pt")
        _write_csv(out / "loss_trace.csv", ["epoch", "loss"], [[i + 1, v] for i, v in enumerate(plugin.loss_trace)])
        return {"final_loss": plugin.loss_trace[-1] if plugin.loss_trace else None}

    def _build_eval_inference(self, out: Path, split: str, role: str) -> dict:
        cfg = self.config
        sm = self.split_model(split)
        client_sum, server_sum = M.weights_checksum(sm.client), M.weights_checksum(sm.server)
        plugin = self.plugin(split)
        p_test, s_test = self.primary_sets()[1], self.sensitive_sets()[1]
        ai = self.adversary(split, "inference")
        ao = self.adversary(split, "offline") if self._uses_offline() else None

        def scores(pl):
            s = A.evaluate_adversary(sm.server, sm, pl, *p_test.xy)
            a = A.evaluate_adversary(ai, sm, pl, *s_test.xy)
            return s, a

        s_a, ai_a = scores(None)
        if isinstance(plugin, P.PcaPlugin) and cfg.protection.pca_k_apply:
            plugin = plugin.with_components(min(cfg.protection.pca_k_apply, plugin.k_max))
        s_b, ai_b = scores(plugin)
        row = {"S_alpha": s_a, "S_beta": s_b, "Ai_alpha": ai_a, "Ai_beta": ai_b, "Ao_alpha": None, "Ao_beta": None}
        if ao is not None:
            row["Ao_alpha"] = A.evaluate_adversary(ao, sm, None, *s_test.xy)
            row["Ao_beta"] = A.evaluate_adversary(ao, sm, plugin, *s_test.xy)
        verdict = MT.judge(s_a, s_b, ai_a, ai_b, cfg.thresholds_obj())
        row.update(self._labels(split))
        row.update(split=split, verdict="pass" if verdict.verdict else "fail", clauses=verdict.to_dict())

        if isinstance(plugin, P.PcaPlugin):
            ks = cfg.protection.pca_ks or P.log_spaced_ks(plugin.k_max)
            ks = [k for k in ks if k <= plugin.k_max]
            curve = P.sweep_components(plugin, ks, scores)
            evr = np.cumsum(plugin.explained_variance_ratio())
            _write_csv(
                out / "pca_sweep.csv",
                ["k", "S", "Ai", "explained"],
                [[k, s, a, float(evr[k - 1])] for k, s, a in curve],
            )
        else:
            snaps = torch.load(self.run("train_protection", split).file("snapshots.pt"), weights_only=False)
            loss = [float(r["loss"]) for r in _read_csv(self.run("train_protection", split).file("loss_trace.csv"))]
            rows = []
            for e, state in enumerate(snaps, start=1):
                plugin.net.load_state_dict(state)
                s, a = scores(plugin)
                rows.append([e, s, a, loss[e - 1]])
            _write_csv(out / "epoch_curve.csv", ["epoch", "S", "Ai", "loss"], rows)

        if (M.weights_checksum(sm.client), M.weights_checksum(sm.server)) != (client_sum, server_sum):
            raise StageError("client or server weights changed during evaluation")
        (out / "metrics.json").write_text(json.dumps(row, indent=2, sort_keys=True))
        return {"verdict": row["verdict"]}

    def _build_eval_reconstruction(self, out: Path, split: str, role: str) -> dict:
        cfg = self.config
        sm = self.split_model(split)
        plugin = self.plugin(split)
        if isinstance(plugin, P.PcaPlugin) and cfg.protection.pca_k_apply:
            plugin = plugin.with_components(min(cfg.protection.pca_k_apply, plugin.k_max))
        test = self.primary_sets()[1]
        rcfg = cfg.reconstruction_config()
        rows = []
        for idx in cfg.reconstruction.image_indices:
            if not (0 <= idx < len(test)):
                raise ConfigError(f"reconstruction image index {idx} outside the test set")
            img = test.images[idx]
            before = A.evaluate_reconstruction(sm, None, img, rcfg)
            after = A.evaluate_reconstruction(sm, plugin, img, rcfg)
            trip = torch.cat([img, before.reconstruction.image, after.reconstruction.image], dim=2)
            _save_png(trip, out / f"triptych_{idx}.png")
            rows.append(
                {
                    "image_index": idx,
                    "image_id": test.ids[idx],
                    "msssim_before": before.msssim,
                    "msssim_after": after.msssim,
                    "success_before": int(before.success),
                    "success_after": int(after.success),
                }
            )
        _write_csv(out / "reconstruction.csv", list(rows[0]), rows)
        summary = {
            "split": split,
            "msssim_before": float(np.mean([r["msssim_before"] for r in rows])),
            "msssim_after": float(np.mean([r["msssim_after"] for r in rows])),
            "msssim_scales": MT.feasible_scales(tuple(test.images.shape[-2:]), MT.MsSsimParams()),
            **self._labels(split),
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        return summary

    def _build_report(self, out: Path, split: str, role: str) -> dict:
        from . import report as R

        rows = [self.metrics_row(sp) for sp in self.config.splits]
        R.emit_report(rows, out, self.config.thresholds_obj())
        return {"rows": len(rows)}

    def metrics_row(self, split: str) -> dict:
        inf = json.loads(self.run("eval_inference", split).file("metrics.json").read_text())
        rec = json.loads(self.run("eval_reconstruction", split).file("summary.json").read_text())
        row = {k: inf.get(k) for k in ("split", "strategy", "method", "arch", "protection", "verdict")}
        for k in ("S_alpha", "S_beta", "Ao_alpha", "Ao_beta", "Ai_alpha", "Ai_beta"):
            row[k] = inf.get(k)
        row["msssim_before"], row["msssim_after"] = rec["msssim_before"], rec["msssim_after"]
        row["experiment_id"] = f"{self.config.name}-{split}-{self.key('eval_inference', split)[:8]}"
        row["note"] = ""
        row["_inference_dir"] = str(self.run("eval_inference", split).path)
        row["_reconstruction_dir"] = str(self.run("eval_reconstruction", split).path)
        return row


def run_stage(config: ExperimentConfig, stage: str, cache_dir, split: str = "", role: str = "", force=()) -> StageArtifact:
    return Pipeline(config, cache_dir, force=force).run(stage, split, role)


# ---------------------------------------------------------------------------
# experiment matrix


def matrix_cells(config: ExperimentConfig, axes: dict | None = None) -> list[ExperimentConfig]:
    """Cross product of the axes; axes that cannot vary a cell collapse to one value."""
    m = asdict(config.matrix)
    if axes:
        m.update({k: list(v) for k, v in axes.items() if v})
    protections = m.get("protections") or [config.protection.kind]
    strategies = m.get("strategies") or [config.delta.strategy]
    methods = m.get("methods") or [config.delta.method]
    splits = m.get("splits") or list(config.splits)
    archs = m.get("archs") or [config.adversary.offline_arch]
    cells, seen = [], set()
    for prot, strat, meth, sp, arch in itertools.product(protections, strategies, methods, splits, archs):
        if prot == "pca":
            strat, meth, arch = config.delta.strategy, config.delta.method, config.adversary.offline_arch
        elif strat == "delta_max":
            arch = config.adversary.offline_arch  # no offline adversary involved
        ident = (prot, strat, meth, sp, arch)
        if ident in seen:
            continue
        seen.add(ident)
        cell = config.with_overrides(
            **{
                "protection.kind": prot,
                "delta.strategy": strat,
                "delta.method": meth,
                "adversary.offline_arch": arch,
                "splits": [sp],
            }
        )
        cells.append(cell)
    return cells


def run_matrix(config: ExperimentConfig, cache_dir, axes: dict | None = None, force=()) -> list[dict]:
    """One metrics row per cell; infeasible cells come back as ``skipped`` rows."""
    rows = []
    for cell in matrix_cells(config, axes):
        pipe = Pipeline(cell, cache_dir, force=force)
        sp = cell.splits[0]
        try:
            pipe.run("eval_inference", sp)
            pipe.run("eval_reconstruction", sp)
            rows.append(pipe.metrics_row(sp))
        except (P.UnsupportedLayer, A.AdversaryInfeasible) as exc:
            labels = pipe._labels(sp)
            row = {"split": sp, **{k: labels[k] for k in ("strategy", "method", "arch", "protection")}}
            row.update(experiment_id=f"{cell.name}-{sp}-skipped", verdict="skipped", note=str(exc))
            rows.append(row)
            log.warning("skipping cell %s: %s", row["experiment_id"], exc)
    return rows
