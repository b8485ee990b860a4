"""Warping and the composite loss on a synthetic case.

Shows how the three loss terms react as the moving image is warped by
scaled versions of the ground-truth field: the objective is smallest
when the deformation is right.

    python demos/warp_and_losses.py
"""
import numpy as np

from fusereg import (
    DisplacementField,
    landmark_errors,
    make_synthetic_case,
    total_loss,
    warp,
)


def main():
    case = make_synthetic_case(seed=3, size=48)
    pre, post, gt = case.pre_study, case.post_study, case.gt_field
    print(f"case {case.case_id}: {pre.shape} voxels, {len(pre.landmarks)} landmark pairs")

    zero = DisplacementField.zero(pre.shape)
    initial = landmark_errors(post.landmarks, pre.landmarks, zero, pre.spacing, pre.origin)
    exact = landmark_errors(post.landmarks, pre.landmarks, gt, pre.spacing, pre.origin)
    print(f"landmark median error: identity {np.median(initial):.2f} mm, "
          f"ground-truth field {np.median(exact):.4f} mm")

    print(f"{'alpha':>6} {'l_mse':>10} {'l_diff':>10} {'l_edge':>10} {'l_total':>10}")
    for alpha in (0.0, 0.5, 1.0, 1.5):
        field = DisplacementField(alpha * gt.u)
        warped = warp(pre.t1, field)
        report = total_loss(warped, post.t1, field)
        print(f"{alpha:>6.1f} {report.l_mse:>10.5f} {report.l_diff:>10.5f} "
              f"{report.l_edge:>10.5f} {report.l_total:>10.5f}")
    print("the image terms dip at alpha=1; the diffusion term grows with "
          "field magnitude, favoring the smoothest sufficient deformation")


if __name__ == "__main__":
    main()
