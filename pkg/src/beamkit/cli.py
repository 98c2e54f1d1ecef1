"""``beamkit`` command line: simulate, enhance, eval."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from .errors import BeamkitError
from .pipeline import enhance, evaluate, load_run_config, simulate

log = logging.getLogger("beamkit")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="beamkit", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="render a scene spec to wavs, mask and truth")
    sim.add_argument("--config", required=True, help="scene spec file")
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--seed", type=int, default=None, help="override the scene seed")

    enh = sub.add_parser("enhance", help="beamform a recording (batch or online)")
    enh.add_argument("--config", help="run config (flat dotted keys)")
    enh.add_argument("--input", help="multichannel input wav")
    enh.add_argument("--mode", choices=["batch", "online"])
    enh.add_argument("--beamformer")
    enh.add_argument("--sve", choices=["fixed", "mask_only", "wscm", "ica_lc", "ica_pc", "ica_hc"])
    enh.add_argument("--mask", help="BKM1 mask file")
    enh.add_argument("--steering", help="BKH1 steering file")
    enh.add_argument("--truth", help="simulate output dir or manifest, for scoring")
    enh.add_argument("--out", help="enhanced output wav")
    enh.add_argument("--report", help="report TSV path (figures are written alongside)")
    enh.add_argument("--iters", type=int)
    enh.add_argument("--a1", type=float)
    enh.add_argument("--az", type=float)
    enh.add_argument("--seed", type=int)
    enh.add_argument("--no-figures", dest="figures", action="store_false", default=None)

    ev = sub.add_parser("eval", help="score an enhanced wav against scene truth")
    ev.add_argument("--input", required=True, help="enhanced wav")
    ev.add_argument("--truth", required=True, help="simulate output dir or manifest")
    ev.add_argument("--steering", help="estimated steering file for the SVE cosine")
    ev.add_argument("--report", help="write metrics as JSON (.json) or TSV (other)")
    return ap


def _fmt(v) -> str:
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:.4f}"
    return str(v)


def cmd_simulate(args) -> int:
    man = simulate(args.config, args.out, args.seed)
    print(f"wrote scene to {args.out}")
    print(f"snr_db\t{man['snr_db']}")
    print(f"n_frames\t{man['n_frames']}")
    print(f"move_frames\t{','.join(map(str, man['move_frames'])) or '-'}")
    return 0


def cmd_enhance(args) -> int:
    overrides = {k: getattr(args, k) for k in
                 ("input", "mode", "beamformer", "sve", "mask", "steering", "truth", "out",
                  "report", "iters", "a1", "az", "seed", "figures")}
    cfg = load_run_config(args.config, overrides)
    summary = enhance(cfg)
    for key in ("mode", "beamformer", "sve", "max_distortionless", "max_null",
                "max_normalization", "si_sdr_db", "si_sdr_improvement_db", "sve_cosine_mean",
                "runtime_s"):
        if key in summary:
            v = summary[key]
            print(f"{key}\t{'na' if v is None else _fmt(v)}")
    return 0


def cmd_eval(args) -> int:
    m = evaluate(args.input, args.truth, args.steering)
    width = max(len(k) for k in m)
    print(f"{'metric':<{width}}  value")
    for k, v in m.items():
        print(f"{k:<{width}}  {_fmt(v)}")
    if args.report:
        path = Path(args.report)
        if path.suffix == ".json":
            path.write_text(json.dumps({k: float(v) for k, v in m.items()}, indent=2) + "\n")
        else:
            path.write_text("metric\tvalue\n" + "".join(f"{k}\t{_fmt(v)}\n" for k, v in m.items()))
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"simulate": cmd_simulate, "enhance": cmd_enhance, "eval": cmd_eval}[args.command]
    try:
        return handler(args)
    except BeamkitError as exc:
        print(f"beamkit: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"beamkit: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
