"""Per-seed experiment world and the batch commands behind the CLI verbs.

For each run seed the world derives disjoint sub-seeds for the dataset, the
encoder, the fixed prompts, and every trainer, so methods never share random
streams and every artifact is reproducible from (config, seed) alone.  The
frozen encoder is built in its aligned ("pretrained") form around the class
prototypes of the seed's dataset; that is what gives the fixed-prompt
baseline its nontrivial zero-shot accuracy.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_hash, config_text
from .data import OpenWorldDataset, generate, sample_prototypes, save_dataset
from .decoop import (
    DecoopModel,
    decoop_new_score,
    decoop_predict,
    save_decoop,
    train_decoop,
)
from .dept import DeptModel, check_theorem, dept_predict, report_record
from .metrics import (
    EvalReport,
    auroc,
    eval_csv_header,
    eval_csv_row,
    evaluate,
    roc_csv_lines,
    roc_points,
)
from .model import FrozenEncoder, Temperature, image_embedding
from .tuning import TrainConfig, TrainedClassifier, pt_predict, save_classifier, tune_prompt
from .zeroshot import ZeroShotModel, msp_space_scores, zs_predict

__all__ = ["World", "cmd_run", "cmd_theorem", "cmd_sweep_gamma", "cmd_roc", "cmd_gen_data"]

# sub-seed offsets keeping every random stream of a run disjoint
ENCODER_OFFSET = 100_000
ZS_OFFSET = 200_000
COOP_OFFSET = 300_000
DETECTOR_OFFSET = 400_000
SUBCLS_OFFSET = 500_000

GAMMA_SWEEP_DEFAULT = (0.1, 0.2, 0.4, 0.8)


class _Embedder:
    """Per-world memo of image embeddings keyed by example identity."""

    def __init__(self, enc: FrozenEncoder):
        self.enc = enc
        self._memo: dict[int, np.ndarray] = {}

    def of(self, example) -> np.ndarray:
        z = self._memo.get(id(example))
        if z is None:
            z = image_embedding(self.enc, example.feature)
            self._memo[id(example)] = z
        return z


@dataclass
class World:
    """Everything one seed needs, built lazily so cheap methods stay cheap."""

    config: ExperimentConfig
    seed: int
    gamma: float | None = None  # detector margin override for sweeps

    dataset: OpenWorldDataset = field(init=False)
    enc: FrozenEncoder = field(init=False)
    temp: Temperature = field(init=False)

    def __post_init__(self):
        cfg = self.config
        spec = replace(cfg.dataset, seed=self.seed)
        self.dataset = generate(spec)
        self.enc = FrozenEncoder.aligned(
            sample_prototypes(spec),
            token_dim=cfg.model.token_dim,
            embed_dim=cfg.model.embed_dim,
            seed=self.seed + ENCODER_OFFSET,
            text_gain=cfg.model.text_gain,
            token_noise=cfg.model.token_noise,
            prompt_len=cfg.train.prompt_len,
        )
        self.temp = Temperature(cfg.model.temperature)
        self.embed = _Embedder(self.enc)
        self._built: dict[str, object] = {}

    # --- lazily built models -------------------------------------------------

    def _zs(self, n_prompts: int) -> ZeroShotModel:
        key = f"zs{n_prompts}"
        if key not in self._built:
            self._built[key] = ZeroShotModel.seeded(
                self.enc,
                seed=self.seed + ZS_OFFSET,
                n_prompts=n_prompts,
                prompt_len=self.config.train.prompt_len,
                scale=self.config.model.zs_prompt_scale,
                temp=self.temp,
            )
        return self._built[key]

    @property
    def zs_single(self) -> ZeroShotModel:
        return self._zs(1)

    @property
    def zs_ensemble(self) -> ZeroShotModel:
        return self._zs(self.config.model.zs_ensemble)

    @property
    def coop(self) -> TrainedClassifier:
        if "coop" not in self._built:
            cfg = self.config.train
            self._built["coop"] = tune_prompt(
                self.enc,
                self.dataset.train,
                self.dataset.class_space.base,
                TrainConfig(
                    epochs=cfg.classifier_epochs,
                    lr=cfg.lr,
                    batch_size=cfg.batch_size,
                    seed=self.seed + COOP_OFFSET,
                    prompt_len=cfg.prompt_len,
                ),
                self.temp,
            )
        return self._built["coop"]

    @property
    def dept(self) -> DeptModel:
        if "dept" not in self._built:
            self._built["dept"] = DeptModel(self.zs_single, self.coop, self.dataset.class_space)
        return self._built["dept"]

    @property
    def decoop(self) -> DecoopModel:
        if "decoop" not in self._built:
            cfg = self.config.train
            gamma = self.gamma if self.gamma is not None else cfg.gamma
            detector_cfg = TrainConfig(
                epochs=cfg.detector_epochs,
                lr=cfg.lr,
                batch_size=cfg.batch_size,
                seed=self.seed + DETECTOR_OFFSET,
                margin=gamma,
                prompt_len=cfg.prompt_len,
            )
            classifier_cfg = TrainConfig(
                epochs=cfg.classifier_epochs,
                lr=cfg.lr,
                batch_size=cfg.batch_size,
                seed=self.seed + SUBCLS_OFFSET,
                prompt_len=cfg.prompt_len,
            )
            self._built["decoop"] = train_decoop(
                self.enc,
                self.dataset,
                self.zs_ensemble,
                detector_cfg,
                classifier_cfg,
                n_detectors=self.config.n_detectors,
            )
        return self._built["decoop"]

    # --- method surfaces ------------------------------------------------------

    def predictor(self, method: str):
        """(predict_fn, score_fn) pair over the full class space."""
        space = self.dataset.class_space
        all_classes = space.all_classes
        base_set = set(space.base)

        def msp_base(dist) -> float:
            return max(p for c, p in zip(dist.support, dist.probs) if c in base_set)

        if method in ("zs", "prompt-ens"):
            model = self.zs_single if method == "zs" else self.zs_ensemble
            return (
                lambda ex: zs_predict(model, all_classes, self.embed.of(ex)).argmax(),
                lambda ex: msp_space_scores(model, space, self.embed.of(ex))[0],
            )
        if method == "coop":
            return (
                lambda ex: pt_predict(self.coop, all_classes, self.embed.of(ex)).argmax(),
                lambda ex: msp_base(pt_predict(self.coop, all_classes, self.embed.of(ex))),
            )
        if method == "dept":
            model = self.dept

            def routed_dist(ex):
                z = self.embed.of(ex)
                s_b, s_n = msp_space_scores(model.zs, space, z)
                if s_b >= s_n:
                    return pt_predict(model.pt, all_classes, z)
                return zs_predict(model.zs, all_classes, z)

            return (
                lambda ex: dept_predict(model, self.embed.of(ex))[0],
                lambda ex: msp_base(routed_dist(ex)),
            )
        if method == "decoop":
            model = self.decoop
            return (
                lambda ex: decoop_predict(model, self.embed.of(ex))[0],
                lambda ex: decoop_new_score(model, self.embed.of(ex)),
            )
        raise ValueError(f"unknown method {method!r}")

    def evaluate_method(self, method: str) -> EvalReport:
        predict_fn, score_fn = self.predictor(method)
        return evaluate(predict_fn, self.dataset.test, score_fn)

    def detection_scores(self, method: str):
        """Base/new score lists for ROC exports."""
        _, score_fn = self.predictor(method)
        base = [score_fn(ex) for ex in self.dataset.test if ex.space_tag == "base"]
        new = [score_fn(ex) for ex in self.dataset.test if ex.space_tag == "new"]
        return base, new


def _resolve_output_dir(cfg: ExperimentConfig) -> Path:
    override = os.environ.get("OWPT_OUTPUT_DIR")
    path = Path(override) if override else Path(cfg.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _mean_std(values) -> tuple[float, float]:
    values = list(values)
    mean = math.fsum(values) / len(values)
    var = math.fsum((v - mean) ** 2 for v in values) / len(values)  # population variance
    return mean, math.sqrt(var)


def cmd_run(cfg: ExperimentConfig) -> Path:
    """Train and evaluate every requested method on every seed.

    Writes ``results.csv`` plus a manifest with the config snapshot, artifact
    paths, and mean/population-std summaries; returns the output directory.
    """
    out = _resolve_output_dir(cfg)
    run_tag = config_hash(cfg)
    rows = [eval_csv_header()]
    manifest_rows = []
    artifacts: dict[str, str] = {}

    for seed in cfg.seeds:
        world = World(cfg, seed)
        for method in cfg.methods:
            report = world.evaluate_method(method)
            run_id = f"{run_tag}-{method}-s{seed}"
            rows.append(eval_csv_row(run_id, method, seed, report))
            manifest_rows.append(
                {
                    "run_id": run_id,
                    "method": method,
                    "seed": seed,
                    "acc_base": report.acc_base,
                    "acc_new": report.acc_new,
                    "acc_overall": report.acc_overall,
                    "h": report.h_metric,
                    "auroc": report.auroc,
                }
            )
        if "coop" in cfg.methods or "dept" in cfg.methods:
            path = out / f"coop_seed{seed}.json"
            save_classifier(world.coop, path)
            artifacts[f"coop_seed{seed}"] = path.name
        if "decoop" in cfg.methods:
            path = out / f"decoop_seed{seed}.json"
            save_decoop(world.decoop, path)
            artifacts[f"decoop_seed{seed}"] = path.name

    _write_text(out / "results.csv", "\n".join(rows) + "\n")

    summary = {}
    for method in cfg.methods:
        per_metric = {}
        for metric in ("acc_base", "acc_new", "acc_overall", "h", "auroc"):
            values = [r[metric] for r in manifest_rows if r["method"] == method]
            mean, std = _mean_std(values)
            per_metric[metric] = {"mean": mean, "std": std}
        summary[method] = per_metric

    manifest = {
        "config": config_text(cfg),
        "config_hash": run_tag,
        "std_formula": "population (divide by n)",
        "rows": manifest_rows,
        "artifacts": artifacts,
        "summary": summary,
    }
    with open(out / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return out


def cmd_theorem(cfg: ExperimentConfig) -> tuple[Path, bool, bool]:
    """Check both error bounds per seed; returns (dir, all_hold, all_valid)."""
    out = _resolve_output_dir(cfg)
    all_hold, all_valid = True, True
    for seed in cfg.seeds:
        world = World(cfg, seed)
        report = check_theorem(world.dept, world.dataset.test)
        _write_text(out / f"theorem_seed{seed}.txt", report_record(report, seed=seed))
        all_hold &= report.bound_zs_holds and report.bound_dept_holds
        all_valid &= report.valid
    return out, all_hold, all_valid


def cmd_sweep_gamma(cfg: ExperimentConfig, gammas=GAMMA_SWEEP_DEFAULT) -> Path:
    """Retrain the detector ensemble per margin value; one CSV row per (gamma, seed)."""
    out = _resolve_output_dir(cfg)
    rows = ["gamma,seed,acc_base,acc_new,acc_overall,h,auroc"]
    for gamma in gammas:
        for seed in cfg.seeds:
            world = World(cfg, seed, gamma=gamma)
            r = world.evaluate_method("decoop")
            rows.append(
                f"{gamma!r},{seed},{r.acc_base!r},{r.acc_new!r},"
                f"{r.acc_overall!r},{r.h_metric!r},{r.auroc!r}"
            )
    _write_text(out / "sweep_gamma.csv", "\n".join(rows) + "\n")
    return out


ROC_METHODS = ("zs", "coop", "decoop")


def cmd_roc(cfg: ExperimentConfig) -> Path:
    """Export ROC curves (and an AUROC summary) for the three detection scores."""
    out = _resolve_output_dir(cfg)
    summary = ["method,seed,auroc"]
    for seed in cfg.seeds:
        world = World(cfg, seed)
        for method in ROC_METHODS:
            base, new = world.detection_scores(method)
            curve = roc_points(base, new)
            _write_text(
                out / f"roc_{method}_seed{seed}.csv", "\n".join(roc_csv_lines(curve)) + "\n"
            )
            summary.append(f"{method},{seed},{auroc(base, new)!r}")
    _write_text(out / "roc_auroc.csv", "\n".join(summary) + "\n")
    return out


def cmd_gen_data(cfg: ExperimentConfig) -> Path:
    """Write the dataset text export for every seed."""
    out = _resolve_output_dir(cfg)
    for seed in cfg.seeds:
        save_dataset(generate(replace(cfg.dataset, seed=seed)), out / f"dataset_seed{seed}.txt")
    return out
