"""Command-line interface.

Subcommands: synth, preprocess, affine, train, register, evaluate.
Exit code 0 on success, nonzero with a message on stderr otherwise.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import io as fio
from .synth import CONTRAST_NAMES, load_case_dir, make_synthetic_case, save_case
from .harness import (
    CasePair,
    Checkpoint,
    TrainConfig,
    evaluate_suite,
    preprocess_pair,
    register_case,
    train,
)
from .warp import AffineConfig, _affine_field_tensor, affine_register, warp_tensor


def _case_dirs(data_dir: Path) -> list[Path]:
    dirs = sorted(p for p in Path(data_dir).iterdir() if (p / "pre_t1.nii.gz").exists())
    if not dirs:
        raise FileNotFoundError(f"no case directories with pre_t1.nii.gz under {data_dir}")
    return dirs


def _load_pairs(data_dir: Path) -> list[CasePair]:
    pairs = []
    for case_dir in _case_dirs(data_dir):
        pre, post, gt = load_case_dir(case_dir, prefer_preprocessed=True)
        pairs.append(CasePair(pre, post, gt))
    return pairs


def cmd_synth(args: argparse.Namespace) -> int:
    case = make_synthetic_case(seed=args.seed, size=args.size)
    out = save_case(case, args.out)
    print(f"wrote synthetic case {case.case_id} to {out}")
    return 0


def cmd_preprocess(args: argparse.Namespace) -> int:
    case_dir = Path(args.case)
    pre, post, _ = load_case_dir(case_dir, prefer_preprocessed=False)
    pre_pp, post_pp = preprocess_pair(pre, post, nbins=args.nbins)
    for prefix, study in (("pre", pre_pp), ("post", post_pp)):
        for name in CONTRAST_NAMES:
            fio.save_volume(getattr(study, name), case_dir / f"{prefix}_{name}_pp.nii.gz")
    print(f"preprocessed case in {case_dir} (suffix _pp)")
    return 0


def cmd_affine(args: argparse.Namespace) -> int:
    case_dir = Path(args.case)
    pre, post, _ = load_case_dir(case_dir, prefer_preprocessed=True)
    config = AffineConfig(contrast=args.contrast)
    result = affine_register(getattr(pre, config.contrast), getattr(post, config.contrast), config)
    payload = json.loads(result.transform.to_json())
    payload.update(
        {
            "final_mse": result.final_mse,
            "identity_mse": result.identity_mse,
            "improved": result.improved,
            "contrast": config.contrast,
        }
    )
    Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    u = _affine_field_tensor(
        torch.from_numpy(result.transform.linear).float(),
        torch.from_numpy(result.transform.translation).float(),
        pre.shape,
    )
    for name in CONTRAST_NAMES:
        vol = getattr(pre, name)
        resampled = vol.with_data(warp_tensor(torch.from_numpy(vol.data), u).numpy())
        fio.save_volume(resampled, case_dir / f"pre_{name}_aff.nii.gz")
    print(f"affine transform written to {args.out} (improved={result.improved})")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = TrainConfig.from_toml(args.config) if args.config else TrainConfig()
    pairs = _load_pairs(Path(args.data))
    ckpt = train(config, pairs, out_dir=args.out)
    print(f"trained {ckpt.step} steps on {len(pairs)} case(s); checkpoint in {args.out}")
    return 0


def cmd_register(args: argparse.Namespace) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    pre, post, _ = load_case_dir(Path(args.case), prefer_preprocessed=True)
    field, warped, score = register_case(ckpt, pre, post)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fio.save_field(field.u, out / "field.nii.gz", pre.spacing, pre.origin)
    fio.save_volume(warped, out / "warped_fused.nii.gz")
    if score is not None:
        (out / "score.json").write_text(json.dumps(score.to_json_dict(), indent=2) + "\n")
        print(f"registered: median AE {score.median_ae:.3f} mm, robustness {score.robustness:.2f}")
    else:
        print("registered (no landmarks available for scoring)")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    pairs = _load_pairs(Path(args.data))
    result = evaluate_suite(ckpt, pairs)
    out = Path(args.out)
    result.write_csv(out)
    result.write_json(out.with_suffix(".json"))
    print(
        f"evaluated {len(pairs)} case(s): pooled median AE {result.pooled_median:.3f} mm "
        f"(initial {result.pooled_initial_median:.3f} mm)"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusereg",
        description="Multi-contrast MRI fusion and deformable registration toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic case directory")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="z-normalize + histogram-match a case in place")
    p.add_argument("--case", required=True)
    p.add_argument("--nbins", type=int, default=256)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("affine", help="affine pre-registration for one case")
    p.add_argument("--case", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--contrast", default="t1ce", choices=list(CONTRAST_NAMES))
    p.set_defaults(func=cmd_affine)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", default=None, help="TOML config (defaults used if omitted)")
    p.add_argument("--data", required=True, help="directory of case subdirectories")
    p.add_argument("--out", required=True, help="output directory for checkpoint + log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="register one case with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--case", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="score a suite of cases into a CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # CLI boundary: message + nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
