"""Training loop, two-trial protocol, checkpointing, suite evaluation.

Training follows the protocol: Adam, batch size 1, decaying learning
rate starting at 1e-4 (polynomial decay by default). With
``affine_first`` each case's moving study is pre-warped once by its
affine registration result before entering the network; the affine stays
frozen during training. Everything is deterministic for a fixed seed on
a fixed device.
"""
from __future__ import annotations

import csv
import json
import math
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .backbone import BackboneConfig
from .fusion import FusionConfig, InceptionConfig, study_tensor
from .losses import LossReport, LossWeights, diffusion_loss, edge_loss, mse_loss
from .metrics import CaseScore, jacobian_det, landmark_errors, neg_jacobian_fraction, summarize
from .model import RegistrationCascade, build_cascade
from .volume import (
    DisplacementField,
    MultiContrastStudy,
    Volume3D,
    brain_mask,
    histogram_match,
    znorm_brain,
)
from .warp import (
    AffineConfig,
    AffineTransform,
    _affine_field_tensor,
    affine_register,
    compose_affine_after,
    warp_tensor,
)

LR_SCHEDULES = ("poly", "constant")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    steps_per_epoch: int = 300
    lr_initial: float = 1e-4
    lr_schedule: str = "poly"
    lr_power: float = 0.9
    seed: int = 0
    weights: LossWeights = LossWeights()
    affine_first: bool = False
    fusion: FusionConfig = FusionConfig()
    backbone: BackboneConfig = BackboneConfig()
    affine: AffineConfig = AffineConfig()
    loss_on_raw_contrasts: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.steps_per_epoch < 0:
            raise ValueError("steps_per_epoch must be >= 0")
        if self.lr_initial <= 0:
            raise ValueError("lr_initial must be > 0")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def to_dict(self) -> dict:
        return {
            "train": {
                "epochs": self.epochs,
                "steps_per_epoch": self.steps_per_epoch,
                "lr_initial": self.lr_initial,
                "lr_schedule": self.lr_schedule,
                "lr_power": self.lr_power,
                "seed": self.seed,
                "affine_first": self.affine_first,
            },
            "loss": {
                "w_mse": self.weights.w_mse,
                "w_diff": self.weights.w_diff,
                "w_edge": self.weights.w_edge,
                "on_raw_contrasts": self.loss_on_raw_contrasts,
            },
            "fusion": {
                "instance_norm": self.fusion.instance_norm,
                "input_block": vars(self.fusion.input_block).copy(),
                "merge_block": vars(self.fusion.merge_block).copy(),
            },
            "backbone": {
                "embed_dim": self.backbone.embed_dim,
                "depths": list(self.backbone.depths),
                "heads": list(self.backbone.heads),
                "window": list(self.backbone.window),
                "patch_size": self.backbone.patch_size,
                "decoder_channels": list(self.backbone.decoder_channels),
                "variant": self.backbone.variant,
            },
            "affine": {
                "levels": self.affine.levels,
                "iters_per_level": self.affine.iters_per_level,
                "lr": self.affine.lr,
                "contrast": self.affine.contrast,
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        tr = data.get("train", {})
        lo = data.get("loss", {})
        fu = data.get("fusion", {})
        bb = data.get("backbone", {})
        af = data.get("affine", {})
        base = cls()
        fusion = FusionConfig(
            input_block=InceptionConfig(**fu["input_block"]) if "input_block" in fu
            else base.fusion.input_block,
            merge_block=InceptionConfig(**fu["merge_block"]) if "merge_block" in fu
            else base.fusion.merge_block,
            instance_norm=bool(fu.get("instance_norm", False)),
        )
        backbone = BackboneConfig(
            embed_dim=int(bb.get("embed_dim", base.backbone.embed_dim)),
            depths=tuple(bb.get("depths", base.backbone.depths)),
            heads=tuple(bb.get("heads", base.backbone.heads)),
            window=tuple(bb.get("window", base.backbone.window)),
            patch_size=int(bb.get("patch_size", base.backbone.patch_size)),
            decoder_channels=tuple(bb.get("decoder_channels", base.backbone.decoder_channels)),
            variant=str(bb.get("variant", base.backbone.variant)),
        )
        affine = AffineConfig(
            levels=int(af.get("levels", base.affine.levels)),
            iters_per_level=int(af.get("iters_per_level", base.affine.iters_per_level)),
            lr=float(af.get("lr", base.affine.lr)),
            contrast=str(af.get("contrast", base.affine.contrast)),
        )
        return cls(
            epochs=int(tr.get("epochs", base.epochs)),
            steps_per_epoch=int(tr.get("steps_per_epoch", base.steps_per_epoch)),
            lr_initial=float(tr.get("lr_initial", base.lr_initial)),
            lr_schedule=str(tr.get("lr_schedule", base.lr_schedule)),
            lr_power=float(tr.get("lr_power", base.lr_power)),
            seed=int(tr.get("seed", base.seed)),
            weights=LossWeights(
                w_mse=float(lo.get("w_mse", 1.0)),
                w_diff=float(lo.get("w_diff", 1.0)),
                w_edge=float(lo.get("w_edge", 1.0)),
            ),
            affine_first=bool(tr.get("affine_first", base.affine_first)),
            fusion=fusion,
            backbone=backbone,
            affine=affine,
            loss_on_raw_contrasts=bool(lo.get("on_raw_contrasts", False)),
        )

    @classmethod
    def from_toml(cls, path) -> "TrainConfig":
        try:
            import tomllib  # Python >= 3.11
        except ModuleNotFoundError:  # pragma: no cover - depends on runtime
            import tomli as tomllib
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))


def lr_at(step: int, config: TrainConfig) -> float:
    """Learning rate for a 0-based step; lr(0) == lr_initial exactly."""
    if config.lr_schedule == "constant" or config.total_steps == 0:
        return config.lr_initial
    frac = min(step, config.total_steps) / config.total_steps
    return config.lr_initial * (1.0 - frac) ** config.lr_power


# ---------------------------------------------------------------------------
# checkpointing


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """Model parameters + Adam moments + config snapshot + step counter."""

    params: dict[str, torch.Tensor]
    opt_exp_avg: dict[str, torch.Tensor]
    opt_exp_avg_sq: dict[str, torch.Tensor]
    opt_step: int
    config: TrainConfig
    step: int

    def save(self, path) -> Path:
        path = Path(path)
        manifest = {
            "format": "fusereg-checkpoint-1",
            "step": self.step,
            "opt_step": self.opt_step,
            "config": self.config.to_dict(),
            "params": [
                {"name": name, "shape": list(t.shape)} for name, t in self.params.items()
            ],
            "optimizer": sorted(self.opt_exp_avg),
        }
        stamp = (1980, 1, 1, 0, 0, 0)  # fixed timestamps keep archives bit-reproducible

        def entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
            info = zipfile.ZipInfo(name, date_time=stamp)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, payload)

        with zipfile.ZipFile(path, "w") as zf:
            entry(zf, "manifest.json", json.dumps(manifest, indent=2).encode())
            for name, t in self.params.items():
                entry(zf, f"params/{name}.bin", _tensor_bytes(t))
            for name, t in self.opt_exp_avg.items():
                entry(zf, f"opt/{name}.exp_avg.bin", _tensor_bytes(t))
            for name, t in self.opt_exp_avg_sq.items():
                entry(zf, f"opt/{name}.exp_avg_sq.bin", _tensor_bytes(t))
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with zipfile.ZipFile(path, "r") as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format") != "fusereg-checkpoint-1":
                raise ValueError(f"not a fusereg checkpoint: {path}")
            shapes = {p["name"]: tuple(p["shape"]) for p in manifest["params"]}
            params = {
                name: _bytes_tensor(zf.read(f"params/{name}.bin"), shape)
                for name, shape in shapes.items()
            }
            exp_avg = {}
            exp_avg_sq = {}
            for name in manifest["optimizer"]:
                exp_avg[name] = _bytes_tensor(zf.read(f"opt/{name}.exp_avg.bin"), shapes[name])
                exp_avg_sq[name] = _bytes_tensor(
                    zf.read(f"opt/{name}.exp_avg_sq.bin"), shapes[name]
                )
        return cls(
            params=params,
            opt_exp_avg=exp_avg,
            opt_exp_avg_sq=exp_avg_sq,
            opt_step=int(manifest["opt_step"]),
            config=TrainConfig.from_dict(manifest["config"]),
            step=int(manifest["step"]),
        )


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes()


def _bytes_tensor(raw: bytes, shape: tuple[int, ...]) -> torch.Tensor:
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return torch.from_numpy(arr)


def _checkpoint_from(model: RegistrationCascade, opt: Optional[torch.optim.Adam],
                     config: TrainConfig, step: int) -> Checkpoint:
    params = {name: p.detach().clone() for name, p in model.named_parameters()}
    exp_avg: dict[str, torch.Tensor] = {}
    exp_avg_sq: dict[str, torch.Tensor] = {}
    opt_step = 0
    if opt is not None:
        named = list(model.named_parameters())
        for (name, p) in named:
            state = opt.state.get(p)
            if state:
                exp_avg[name] = state["exp_avg"].detach().clone()
                exp_avg_sq[name] = state["exp_avg_sq"].detach().clone()
                opt_step = int(state["step"])
    return Checkpoint(params, exp_avg, exp_avg_sq, opt_step, config, step)


def model_from_checkpoint(ckpt: Checkpoint) -> RegistrationCascade:
    model = build_cascade(ckpt.config.fusion, ckpt.config.backbone, ckpt.config.seed)
    own = dict(model.named_parameters())
    if set(own) != set(ckpt.params):
        raise ValueError("checkpoint parameters do not match the configured model")
    with torch.no_grad():
        for name, p in own.items():
            p.copy_(ckpt.params[name])
    return model


def _restore_optimizer(opt: torch.optim.Adam, model: RegistrationCascade, ckpt: Checkpoint) -> None:
    for name, p in model.named_parameters():
        if name in ckpt.opt_exp_avg:
            opt.state[p] = {
                "step": torch.tensor(float(ckpt.opt_step)),
                "exp_avg": ckpt.opt_exp_avg[name].clone(),
                "exp_avg_sq": ckpt.opt_exp_avg_sq[name].clone(),
            }


# ---------------------------------------------------------------------------
# cases


def preprocess_pair(
    pre_study: MultiContrastStudy, post_study: MultiContrastStudy, nbins: int = 256
) -> tuple[MultiContrastStudy, MultiContrastStudy]:
    """Standard preprocessing: per-modality z-normalization of both time
    points, then histogram matching of each pre contrast onto its post
    counterpart."""
    pre_vols, post_vols = {}, {}
    for name in ("t1", "t1ce", "t2", "flair"):
        pre_v = getattr(pre_study, name)
        post_v = getattr(post_study, name)
        pre_m = brain_mask(pre_v)
        post_m = brain_mask(post_v)
        pre_z = znorm_brain(pre_v, pre_m)
        post_z = znorm_brain(post_v, post_m)
        pre_vols[name] = histogram_match(pre_z, post_z, pre_m, post_m, nbins)
        post_vols[name] = post_z
    pre_pp = MultiContrastStudy(
        t1=pre_vols["t1"], t1ce=pre_vols["t1ce"], t2=pre_vols["t2"], flair=pre_vols["flair"],
        landmarks=pre_study.landmarks, study_id=pre_study.study_id,
    )
    post_pp = MultiContrastStudy(
        t1=post_vols["t1"], t1ce=post_vols["t1ce"], t2=post_vols["t2"], flair=post_vols["flair"],
        landmarks=post_study.landmarks, study_id=post_study.study_id,
    )
    return pre_pp, post_pp


@dataclass(frozen=True, eq=False)
class CasePair:
    """A preprocessed moving/target study pair ready for training."""

    pre_study: MultiContrastStudy
    post_study: MultiContrastStudy
    gt_field: Optional[DisplacementField] = None

    @property
    def case_id(self) -> str:
        return self.pre_study.study_id


def _affine_for_case(case, config: TrainConfig) -> AffineTransform:
    moving = getattr(case.pre_study, config.affine.contrast)
    fixed = getattr(case.post_study, config.affine.contrast)
    return affine_register(moving, fixed, config.affine).transform


def _prepare_case(case, config: TrainConfig) -> dict:
    moving = study_tensor(case.pre_study)
    fixed = study_tensor(case.post_study)
    entry = {"moving": moving, "fixed": fixed, "affine": None}
    if config.affine_first:
        transform = _affine_for_case(case, config)
        u = _affine_field_tensor(
            torch.from_numpy(transform.linear).float(),
            torch.from_numpy(transform.translation).float(),
            case.pre_study.shape,
        )
        entry["moving"] = warp_tensor(moving, u[None])
        entry["affine"] = transform
    return entry


# ---------------------------------------------------------------------------
# training


def _composite_loss(model_out, entry, config: TrainConfig):
    field, fused_m, fused_f = model_out
    u = field[0]
    if config.loss_on_raw_contrasts:
        warped = warp_tensor(entry["moving"], field)
        l_mse = mse_loss(warped, entry["fixed"])
        l_edge = edge_loss(warped, entry["fixed"])
    else:
        warped = warp_tensor(fused_m, field)
        l_mse = mse_loss(warped, fused_f)
        l_edge = edge_loss(warped[0, 0], fused_f[0, 0])
    l_diff = diffusion_loss(u)
    w = config.weights
    total = w.w_mse * l_mse + w.w_diff * l_diff + w.w_edge * l_edge
    report = LossReport(
        float(l_mse.detach()),
        float(l_diff.detach()),
        float(l_edge.detach()),
        float(total.detach()),
    )
    return total, report


def train(
    config: TrainConfig,
    cases: Sequence,
    out_dir: Optional[Union[str, Path]] = None,
    resume: Optional[Checkpoint] = None,
) -> Checkpoint:
    """Run the training loop (batch size 1) and return the checkpoint.

    ``cases`` are objects with ``pre_study``/``post_study``, already
    preprocessed. When ``out_dir`` is given, a per-step JSONL loss log
    (train.log.jsonl) and the final checkpoint (checkpoint.zip) are
    written there. ``resume`` continues a previous run up to
    ``config.total_steps``.
    """
    if len(cases) == 0:
        raise ValueError("need at least one training case")
    torch.manual_seed(config.seed)

    if resume is not None:
        model = model_from_checkpoint(resume)
        start_step = resume.step
    else:
        model = build_cascade(config.fusion, config.backbone, config.seed)
        start_step = 0
    opt = torch.optim.Adam(model.parameters(), lr=config.lr_initial)
    if resume is not None:
        _restore_optimizer(opt, model, resume)

    prepared = [_prepare_case(case, config) for case in cases]

    out_path = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_path / "train.log.jsonl", "a" if resume is not None else "w")

    last_report: Optional[LossReport] = None
    step = start_step
    try:
        for step in range(start_step, config.total_steps):
            for group in opt.param_groups:
                group["lr"] = lr_at(step, config)
            entry = prepared[step % len(prepared)]
            out = model(entry["moving"], entry["fixed"])
            if not all(torch.isfinite(t).all() for t in out):
                raise RuntimeError(
                    f"non-finite loss at step {step}; last report: {last_report}"
                )
            total, report = _composite_loss(out, entry, config)
            if not math.isfinite(report.l_total):
                raise RuntimeError(
                    f"non-finite loss at step {step}; last report: {last_report}"
                )
            opt.zero_grad()
            total.backward()
            opt.step()
            for name, p in model.named_parameters():
                if not torch.isfinite(p).all():
                    raise RuntimeError(f"non-finite parameter {name} after step {step}")
            last_report = report
            if log_fh is not None:
                log_fh.write(json.dumps(report.json_record(step)) + "\n")
        step = config.total_steps
    finally:
        if log_fh is not None:
            log_fh.close()

    ckpt = _checkpoint_from(model, opt, config, step)
    if out_path is not None:
        ckpt.save(out_path / "checkpoint.zip")
    return ckpt


# ---------------------------------------------------------------------------
# inference + evaluation


def register_case(
    ckpt: Checkpoint,
    pre_study: MultiContrastStudy,
    post_study: MultiContrastStudy,
) -> tuple[DisplacementField, Volume3D, Optional[CaseScore]]:
    """Fusion -> backbone -> warp on one (preprocessed) study pair.

    When the checkpoint was trained with ``affine_first``, a fresh affine
    stage is fit for the pair and composed with the deformable field;
    the returned field is the total backward mapping. The warped fused
    moving image and, when landmarks are present on both studies, a
    CaseScore are returned alongside.
    """
    if pre_study.shape != post_study.shape:
        raise ValueError(f"shape mismatch: {pre_study.shape} vs {post_study.shape}")
    config = ckpt.config
    model = model_from_checkpoint(ckpt)
    model.eval()

    case = CasePair(pre_study, post_study)
    entry = _prepare_case(case, config)
    with torch.no_grad():
        field_t, fused_m, _ = model(entry["moving"], entry["fixed"])
    deformable = DisplacementField(field_t[0].numpy())
    if entry["affine"] is not None:
        total = compose_affine_after(deformable, entry["affine"])
    else:
        total = deformable

    with torch.no_grad():
        fused_orig = model.fusion_moving(study_tensor(pre_study))[0, 0]
    warped = Volume3D(
        warp_tensor(fused_orig, torch.from_numpy(total.u)).numpy(),
        pre_study.spacing,
        pre_study.origin,
    )

    score = None
    if pre_study.landmarks is not None and post_study.landmarks is not None:
        zero = DisplacementField.zero(pre_study.shape)
        before = landmark_errors(
            post_study.landmarks, pre_study.landmarks, zero, pre_study.spacing, pre_study.origin
        )
        after = landmark_errors(
            post_study.landmarks, pre_study.landmarks, total, pre_study.spacing, pre_study.origin
        )
        stats = summarize(before, after)
        njf = neg_jacobian_fraction(jacobian_det(total))
        score = CaseScore(
            case_id=pre_study.study_id,
            errors=tuple(float(e) for e in after),
            median_ae=stats.median_ae,
            mean_ae=stats.mean_ae,
            robustness=stats.robustness,
            neg_jacobian_fraction=njf,
        )
    return total, warped, score


_CSV_COLUMNS = [
    "Case",
    "Initial Median Absolute Error (mm)",
    "Median Absolute Error (mm)",
    "Mean Absolute Error (mm)",
    "Robustness",
    "Negative Jacobian Fraction",
]


@dataclass(frozen=True, eq=False)
class SuiteResult:
    """Per-case scores plus pooled summaries over a case suite."""

    scores: list[CaseScore]
    initial_errors: list[np.ndarray]
    final_errors: list[np.ndarray]

    @property
    def median_of_case_medians(self) -> float:
        return float(np.median([s.median_ae for s in self.scores]))

    @property
    def pooled_median(self) -> float:
        return float(np.median(np.concatenate(self.final_errors)))

    @property
    def pooled_mean(self) -> float:
        return float(np.mean(np.concatenate(self.final_errors)))

    @property
    def pooled_robustness(self) -> float:
        before = np.concatenate(self.initial_errors)
        after = np.concatenate(self.final_errors)
        return float(np.mean(after < before))

    @property
    def pooled_initial_median(self) -> float:
        return float(np.median(np.concatenate(self.initial_errors)))

    def rows(self) -> list[list]:
        rows = []
        for score, initial in zip(self.scores, self.initial_errors):
            rows.append(
                [
                    score.case_id,
                    float(np.median(initial)),
                    score.median_ae,
                    score.mean_ae,
                    score.robustness,
                    score.neg_jacobian_fraction,
                ]
            )
        rows.append(
            [
                "summary_median_of_case_medians",
                self.pooled_initial_median,
                self.median_of_case_medians,
                float(np.mean([s.mean_ae for s in self.scores])),
                float(np.mean([s.robustness for s in self.scores])),
                float(np.mean([s.neg_jacobian_fraction for s in self.scores])),
            ]
        )
        rows.append(
            [
                "summary_pooled_landmarks",
                self.pooled_initial_median,
                self.pooled_median,
                self.pooled_mean,
                self.pooled_robustness,
                float(np.mean([s.neg_jacobian_fraction for s in self.scores])),
            ]
        )
        return rows

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(_CSV_COLUMNS)
            writer.writerows(self.rows())

    def write_json(self, path) -> None:
        Path(path).write_text(
            json.dumps([s.to_json_dict() for s in self.scores], indent=2) + "\n"
        )


def evaluate_suite(ckpt: Checkpoint, cases: Sequence) -> SuiteResult:
    """Score every case and aggregate Table-style summary rows."""
    if len(cases) == 0:
        raise ValueError("need at least one case to evaluate")
    scores: list[CaseScore] = []
    initial: list[np.ndarray] = []
    final: list[np.ndarray] = []
    for case in cases:
        pre, post = case.pre_study, case.post_study
        if pre.landmarks is None or post.landmarks is None:
            raise ValueError(f"case {getattr(case, 'case_id', '?')} has no landmarks")
        _, _, score = register_case(ckpt, pre, post)
        assert score is not None
        zero = DisplacementField.zero(pre.shape)
        before = landmark_errors(post.landmarks, pre.landmarks, zero, pre.spacing, pre.origin)
        scores.append(score)
        initial.append(before)
        final.append(np.asarray(score.errors))
    return SuiteResult(scores, initial, final)
