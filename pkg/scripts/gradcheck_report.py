"""Finite-difference gradient report over several seeds and both precisions."""
import argparse

import numpy as np

from splatkit.autodiff import finite_diff_check, linear_loss
from splatkit.synthetic import default_camera, random_params


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--splats", type=int, default=16)
    ap.add_argument("--size", type=int, default=16)
    args = ap.parse_args()

    cam = default_camera(args.size, args.size)
    for precision, dtype, tol, h_rel in (("f64", np.float64, 1e-4, 1e-5), ("f32", np.float32, 3e-2, 3e-3)):
        for seed in range(args.seeds):
            rng = np.random.default_rng(seed)
            params = random_params(args.splats, cam, rng, dtype=dtype)
            cot = rng.normal(size=(args.size, args.size, 3))
            report = finite_diff_check(params, cam, linear_loss(cot), tolerance=tol, h_rel=h_rel)
            print(f"--- {precision} seed {seed} tol {tol:g} step {h_rel:g}: {'PASS' if report.passed else 'FAIL'}")
            print(report.table())


if __name__ == "__main__":
    main()
