"""Command-line entry point.

Examples::

    sidnism dark/*.png --out results --dump-intermediates
    sidnism dark/ --out results --curve gamma --gamma 2.2 --ref-dir normal/
    sidnism --self-test
"""

from __future__ import annotations

import argparse
import logging
import sys

from .pipeline import CURVES, ConfigError, config_from_dict, load_config_file, run_enhance
from .selftest import run_selftest

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sidnism", description="Self-supervised low-light image enhancement.")
    p.add_argument("inputs", nargs="*", help="PNG files or directories of PNGs")
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--out", help="output directory (default: out)")
    p.add_argument("--iters", type=int, help="optimization iterations per image")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--mode", choices=("cnn", "direct"), help="parameterization of the maps")
    p.add_argument("--curve", choices=CURVES, help="illumination curve")
    p.add_argument("--eta", type=float, help="exponent for --curve fixed-eta")
    p.add_argument("--gamma", type=float, help="gamma for --curve gamma")
    p.add_argument("--eps", type=float, help="gradient suppression threshold")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="parallel images (default: CPU count)")
    p.add_argument("--dump-intermediates", action="store_true", default=None,
                   help="also write R, L, N maps and the loss history")
    p.add_argument("--ref-dir", help="directory of same-named reference images for PSNR/SSIM")
    p.add_argument("--self-test", action="store_true", help="run the built-in verification suite")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.self_test:
        return run_selftest()

    try:
        doc = load_config_file(args.config) if args.config else {}
        flags = {
            "out": args.out, "iters": args.iters, "lr": args.lr, "mode": args.mode,
            "curve": args.curve, "eta": args.eta, "gamma": args.gamma, "eps": args.eps,
            "seed": args.seed, "workers": args.workers,
            "dump_intermediates": args.dump_intermediates, "ref_dir": args.ref_dir,
        }
        if args.inputs:
            flags["inputs"] = args.inputs
        doc.update({k: v for k, v in flags.items() if v is not None})
        cfg = config_from_dict(doc)
        rows, failures = run_enhance(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    print(f"processed {len(rows)} image(s), {len(failures)} failed; report at {cfg.out}/report.csv")
    return EXIT_PARTIAL if failures else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
