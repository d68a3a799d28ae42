"""Command line front end: batch replay of click scripts, the property-check
suites, and a small launcher for the HTTP service."""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from . import fidelity
from .clickmap import load_click_script, parse_step_object
from .errors import QisError
from .grid import BinaryMask, identity_deformation
from .imageio import load_image, load_mask, rasterize_polygon, render_grid_overlay, save_mask
from .qcmath import deformation_dump_bytes
from .session import apply_step, export, init_session, step_summary, topology
from .solver import EnergyParams, _Objective, smooth_template

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_WARNINGS = 2


def _load_template(path: str, height: int, width: int) -> BinaryMask:
    if path.endswith(".json"):
        with open(path) as f:
            pts = json.load(f)
        return rasterize_polygon(pts, height, width)
    return load_mask(path)


def cmd_run(args) -> int:
    image = load_image(args.image)
    template = _load_template(args.template, image.height, image.width)
    truth = load_mask(args.truth) if args.truth else None
    params = EnergyParams(alpha1=args.alpha1, alpha2=args.alpha2)
    state = init_session(image, template, params, args.kmeans_k, args.levels)

    exit_code = EXIT_OK
    if args.clicks:
        with open(args.clicks) as f:
            script = load_click_script(f.read())
        for obj in script:
            clicks = parse_step_object(obj, (image.width, image.height))
            state, warnings = apply_step(state, clicks)
            for w in warnings:
                print(f"step {obj.get('step', '?')}: warning: {w}", file=sys.stderr)
                exit_code = EXIT_WARNINGS

    if args.out:
        save_mask(state.record.mask_n, args.out)
    if args.deform_out:
        with open(args.deform_out, "wb") as f:
            f.write(render_grid_overlay(state.record.phi_n))
    if args.deform_grid:
        with open(args.deform_grid, "wb") as f:
            f.write(deformation_dump_bytes(state.record.phi_n))
    if args.metrics:
        with open(args.metrics, "wb") as f:
            f.write(export(state, "metrics", truth))
    if args.trace:
        with open(args.trace, "wb") as f:
            f.write(export(state, "trace"))

    final = step_summary(state.record, truth)
    comps, holes = topology(state.record.mask_n)
    final["components"] = comps
    final["holes"] = holes
    print(json.dumps(final))
    return exit_code


def _random_stats(rng) -> fidelity.RegionStats:
    p = rng.uniform(0.0, 255.0, 3)
    while abs(p[0] - p[1]) < 1e-6:
        p = rng.uniform(0.0, 255.0, 3)
    a = rng.uniform(50.0, 5000.0, 3)
    return fidelity.RegionStats(p[0], p[1], p[2], a[0], a[1], a[2])


def verify_theorems(seed: int, trials: int) -> tuple:
    """Shifted-energy argmin checks for the click-weight intervals, plus the
    corner property of the partial-inclusion energy."""
    rng = np.random.RandomState(seed)
    failures = 0
    done = 0
    for polarity, want in (("pos", fidelity.UNION), ("neg", fidelity.OMEGA1)):
        count = 0
        attempts = 0
        while count < trials and attempts < trials * 400:
            attempts += 1
            stats = _random_stats(rng)
            rng_r = fidelity.r_positive(stats) if polarity == "pos" else fidelity.r_negative(stats)
            if rng_r.empty:
                continue
            count += 1
            done += 1
            for frac in (0.5, 0.25, 0.75):
                r = rng_r.lo + frac * (rng_r.hi - rng_r.lo)
                if fidelity.predict_minimizer(stats.shifted(r)) != want:
                    failures += 1
    # corner property on a 33x33 grid of excluded areas
    for _ in range(50):
        stats = _random_stats(rng)
        b1 = np.linspace(0.0, stats.a1, 33)
        b2 = np.linspace(0.0, stats.a2, 33)
        for b0 in (0.0, 0.5 * stats.a0, stats.a0):
            grid = np.array([[fidelity.mixed_subset_energy(stats, b0, x, y)
                              for y in b2] for x in b1])
            done += 1
            best = np.unravel_index(np.argmin(grid), grid.shape)
            corner_min = min(grid[0, 0], grid[0, -1], grid[-1, 0], grid[-1, -1])
            if grid[best] < corner_min - 1e-9 * (1.0 + abs(corner_min)):
                failures += 1
    return done - failures, done


def verify_gradients(seed: int, trials: int) -> tuple:
    rng = np.random.RandomState(seed)
    import scipy.ndimage as ndi
    passed = 0
    trials = max(trials, 1)
    for _ in range(trials):
        h = w = 16
        img = rng.uniform(0.0, 255.0, (h, w))
        D = np.zeros((h, w), np.uint8)
        D[4:12, 5:11] = 1
        params = EnergyParams(alpha1=0.01, alpha2=5.0)
        obj = _Objective(img, smooth_template(BinaryMask(D), 1.0),
                         rng.uniform(100, 255), rng.uniform(0, 100), params)
        ident = identity_deformation(h, w).vectors
        pert = np.stack([ndi.gaussian_filter(rng.randn(h + 1, w + 1), 2.0)
                         for _ in range(2)], -1)
        vec = ident + 0.8 * pert / np.abs(pert).max()
        st = obj.full_state(vec)
        g = obj.gradient(st).ravel()
        flat = vec.ravel()
        fd = np.zeros_like(flat)
        step = 1e-5
        for i in range(flat.size):
            vp = flat.copy()
            vp[i] += step
            vm = flat.copy()
            vm[i] -= step
            fd[i] = (obj.try_energy(vp.reshape(vec.shape))[0]
                     - obj.try_energy(vm.reshape(vec.shape))[0]) / (2 * step)
        rel = np.linalg.norm(fd - g) / np.linalg.norm(fd)
        print(f"  gradient trial: relative error {rel:.3e}")
        if rel < 1e-5:
            passed += 1
    return passed, trials


def verify_topology(seed: int, trials: int) -> tuple:
    rng = np.random.RandomState(seed)
    from .grid import ScalarField
    passed = 0
    trials = max(min(trials, 10), 1)
    for t in range(trials):
        h = w = 96
        ys, xs = np.mgrid[0:h, 0:w]
        cy, cx = rng.uniform(40, 56, 2)
        r = rng.uniform(16, 24)
        truth = ((ys - cy) ** 2 + (xs - cx) ** 2 <= r * r)
        img = np.where(truth, 200.0, 50.0) + rng.normal(0, 10, (h, w))
        tmpl = ((ys - cy - rng.uniform(-6, 6)) ** 2
                + (xs - cx - rng.uniform(-6, 6)) ** 2 <= (r * 0.75) ** 2)
        state = init_session(ScalarField(img), BinaryMask(tmpl.astype(np.uint8)))
        if topology(state.record.mask_n) == topology(state.template):
            passed += 1
    return passed, trials


def cmd_verify(args) -> int:
    suites = {
        "theorems": verify_theorems,
        "gradients": verify_gradients,
        "topology": verify_topology,
    }
    if args.suite not in suites:
        print(f"unknown suite {args.suite!r}; choose from {sorted(suites)}", file=sys.stderr)
        return EXIT_ERROR
    t0 = time.perf_counter()
    passed, total = suites[args.suite](args.seed, args.trials)
    dt = time.perf_counter() - t0
    print(f"{args.suite}: {passed}/{total} passed in {dt:.1f}s")
    return EXIT_OK if passed == total else EXIT_ERROR


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qis",
                                     description="click-guided topology-preserving segmentation")
    sub = parser.add_subparsers(dest="command")

    run = sub.add_parser("run", help="replay a click script on an image")
    run.add_argument("--image", required=True)
    run.add_argument("--template", required=True,
                     help="mask PNG or polygon JSON (list of [x, y])")
    run.add_argument("--clicks", help="click script JSON (array of step objects)")
    run.add_argument("--truth", help="ground-truth mask PNG for Dice metrics")
    run.add_argument("--out", help="output mask PNG")
    run.add_argument("--deform-out", help="deformed-grid overlay PNG")
    run.add_argument("--deform-grid", help="binary nodal-grid dump")
    run.add_argument("--metrics", help="metrics JSON path")
    run.add_argument("--trace", help="per-iteration JSONL trace path")
    run.add_argument("--alpha1", type=float, default=0.001)
    run.add_argument("--alpha2", type=float, default=100.0)
    run.add_argument("--kmeans-k", type=int, default=3)
    run.add_argument("--levels", type=int, default=4)
    run.add_argument("--seed", type=int, default=0)
    run.set_defaults(func=cmd_run)

    verify = sub.add_parser("verify", help="run a property-check suite")
    verify.add_argument("--suite", required=True,
                        choices=["theorems", "gradients", "topology"])
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--trials", type=int, default=500)
    verify.set_defaults(func=cmd_verify)

    serve = sub.add_parser("serve", help="start the HTTP service")
    serve.add_argument("--host", default="0.0.0.0")
    serve.add_argument("--port", type=int,
                       default=int(__import__("os").environ.get("QIS_PORT", 8080)))
    serve.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_help()
        return EXIT_ERROR
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except QisError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
