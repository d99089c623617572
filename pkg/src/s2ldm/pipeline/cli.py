"""Command line: gen, train-ae, train-diff, translate, eval, simmap.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
import argparse
import json
import logging
import os
import sys

import numpy as np

from ..autoencoder import encode
from ..metrics import evaluate
from ..phantom import window_normalize
from ..similarity import cosine_map
from .config import RunConfig, load_config
from .io import emit_pgm, load_checkpoint, save_checkpoint
from . import train as tr

log = logging.getLogger("s2ldm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _run_config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_gen(args):
    manifest = tr.write_dataset(args.out, args.n, args.size, args.seed)
    print(f"wrote {manifest['n']} pairs to {args.out}")


def cmd_train_ae(args):
    cfg = _run_config(args)
    pairs, _ = tr.read_dataset(args.data, "train")
    res = tr.train_stage1(cfg, pairs, log_every=args.log_every)
    meta = {"window_width": cfg.window_width, "window_level": cfg.window_level,
            "steps": len(res.curve), "diverged": int(res.diverged)}
    ck = tr.ae_to_checkpoint(res.model, meta)
    save_checkpoint(args.out, ck.tensors, ck.metadata)
    if args.log:
        _write_json(args.log, {"curve": res.curve, "diverged": res.diverged})
    if res.diverged:
        raise RuntimeError(f"stage 1 diverged after {len(res.curve)} steps; "
                           f"partial checkpoint at {args.out}")
    print(f"stage 1: {len(res.curve)} steps, final L_auto {res.curve[-1]['l_auto']:.5f}")


def _load_ae(path):
    ck = load_checkpoint(path)
    ae = tr.ae_from_checkpoint(ck)
    window = (float(ck.metadata.get("window_width", 400.0)), float(ck.metadata.get("window_level", 0.0)))
    return ae, window


def cmd_train_diff(args):
    cfg = _run_config(args)
    ae, (ww, wl) = _load_ae(args.ae)
    cfg = cfg.replace(window_width=ww, window_level=wl)
    pairs, _ = tr.read_dataset(args.data, "train")
    res = tr.train_stage2(cfg, pairs, ae, log_every=args.log_every)
    ck = tr.diff_to_checkpoint(res.model)
    save_checkpoint(args.out, ck.tensors, ck.metadata)
    if args.log:
        _write_json(args.log, {"curve": res.curve, "mask_schedule": res.mask_schedule})
    print(f"stage 2: {len(res.curve)} steps over {cfg.diff_epochs} epochs")


def _inputs(path):
    if os.path.isdir(path):
        names = sorted(n for n in os.listdir(path) if n.endswith(".s2t1"))
        return [(n, os.path.join(path, n)) for n in names]
    return [(os.path.basename(path), path)]


def cmd_translate(args):
    ae, (ww, wl) = _load_ae(args.ae)
    dm = tr.diff_from_checkpoint(load_checkpoint(args.diff))
    t_start = dm.t_start_default if args.t_start is None else args.t_start
    items = _inputs(args.input)
    if not items:
        raise ValueError(f"no .s2t1 inputs in {args.input}")
    to_dir = os.path.isdir(args.input)
    if to_dir:
        os.makedirs(args.out, exist_ok=True)
    for name, path in items:
        ck = load_checkpoint(path)
        if "ncct" not in ck.tensors:
            raise ValueError(f"{path}: no 'ncct' entry")
        x_n = window_normalize(ck.tensors["ncct"], ww, wl)
        pred = tr.translate_images([x_n], ae, dm, args.seed, t_start)[0]
        out = os.path.join(args.out, name) if to_dir else args.out
        save_checkpoint(out, {"pred": np.asarray(pred, dtype=np.float64)},
                        {"stage": "pred", "seed": args.seed, "t_start": t_start,
                         "window_width": ww, "window_level": wl})
    print(f"translated {len(items)} image(s)")


def cmd_eval(args):
    preds, targets = [], []
    pred_items = _inputs(args.pred)
    target_items = dict(_inputs(args.target))
    if os.path.isfile(args.target) and len(pred_items) == 1:
        target_items = {pred_items[0][0]: args.target}
    for name, path in pred_items:
        if name not in target_items:
            raise ValueError(f"no target for prediction {name}")
        p = load_checkpoint(path)
        if "pred" not in p.tensors:
            raise ValueError(f"{path}: no 'pred' entry")
        t = load_checkpoint(target_items[name])
        ww = float(p.metadata.get("window_width", 400.0))
        wl = float(p.metadata.get("window_level", 0.0))
        preds.append(p.tensors["pred"])
        targets.append(window_normalize(t.tensors["cect"], ww, wl))
    report = evaluate(preds, targets)
    with open(args.report, "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    print(report.to_json())


def cmd_simmap(args):
    ae, (ww, wl) = _load_ae(args.ae)
    pair = tr.read_sample(args.input)
    e_n = encode(window_normalize(pair.ncct, ww, wl), ae)
    e_c = encode(window_normalize(pair.cect, ww, wl), ae)
    sim = cosine_map(e_n.astype(np.float64), e_c.astype(np.float64))
    if args.upsample:
        f = pair.ncct.shape[0] // sim.shape[0]
        sim = np.kron(sim, np.ones((f, f)))
    emit_pgm(sim, args.out)
    print(f"similarity map {sim.shape[1]}x{sim.shape[0]}, mean {sim.mean():.4f} -> {args.out}")


def build_parser():
    p = _Parser(prog="s2ldm", description="Non-contrast to contrast CT translation on phantoms.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a phantom dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    a = sub.add_parser("train-ae", help="stage 1: train the syncretic autoencoder")
    a.add_argument("--data", required=True)
    a.add_argument("--config")
    a.add_argument("--seed", type=int)
    a.add_argument("--out", required=True)
    a.add_argument("--log", help="write the loss curve as JSON")
    a.add_argument("--log-every", type=int, default=0)
    a.set_defaults(func=cmd_train_ae)

    d = sub.add_parser("train-diff", help="stage 2: train the latent denoiser")
    d.add_argument("--data", required=True)
    d.add_argument("--ae", required=True)
    d.add_argument("--config")
    d.add_argument("--seed", type=int)
    d.add_argument("--out", required=True)
    d.add_argument("--log", help="write the loss curve and mask schedule as JSON")
    d.add_argument("--log-every", type=int, default=0)
    d.set_defaults(func=cmd_train_diff)

    t = sub.add_parser("translate", help="synthesize contrast images from non-contrast inputs")
    t.add_argument("--in", dest="input", required=True, help="sample file or directory")
    t.add_argument("--ae", required=True)
    t.add_argument("--diff", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--t-start", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_translate)

    e = sub.add_parser("eval", help="score predictions against target samples")
    e.add_argument("--pred", required=True)
    e.add_argument("--target", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("simmap", help="write the latent similarity map of a pair as PGM")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--ae", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--upsample", action="store_true", help="nearest-neighbour to image size")
    s.set_defaults(func=cmd_simmap)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_help(sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"s2ldm {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
