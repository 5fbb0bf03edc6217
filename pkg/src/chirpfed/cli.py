"""Experiment driver: BER sweeps, federation runs, bound tables, complexity.

Every subcommand requires --seed and stamps its CSV output with the tool
version, a config hash and the seed, so reruns with identical inputs are
byte-identical.

Exit codes: 0 success, 2 usage error, 3 validity-flag failure,
4 runtime/training error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys

import numpy as np

from . import __version__
from . import bound as bound_mod
from . import channel as channel_mod
from . import chirp as chirp_mod
from . import data as data_mod
from . import federation as fed_mod
from . import receiver as recv_mod
from .errors import ChirpfedError, TrainingError, ValidityError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDITY = 3
EXIT_RUNTIME = 4

# Published complexity table (operation counts per symbol decision):
# columns MF lambda=1/2/6 and DNN lambda=6 at 960 samples per symbol.
TABLE2 = {
    ("mf", 1): {"add": 1919, "mul": 1842240, "nav": None, "total": 1844159},
    ("mf", 2): {"add": 959, "mul": 460320, "nav": None, "total": 461279},
    ("mf", 6): {"add": 319, "mul": 51040, "nav": None, "total": 51359},
    ("dnn", 6): {"add": 301, "mul": 42420, "nav": 301, "total": 43022},
}


def _config_hash(args: argparse.Namespace) -> str:
    # the output path is where results land, not part of the experiment
    blob = json.dumps({k: repr(v) for k, v in sorted(vars(args).items())
                       if k not in ("func", "out")}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _emit(out, args, rows, header):
    """Write a stamped CSV: comment header then data rows."""
    lines = [
        f"# tool=chirpfed {__version__}",
        f"# config={_config_hash(args)}",
        f"# seed={args.seed}",
        ",".join(header),
    ]
    for row in rows:
        lines.append(",".join(str(v) for v in row))
    text = "\n".join(lines) + "\n"
    if out == "-":
        sys.stdout.write(text)
    else:
        with open(out, "w", newline="") as f:
            f.write(text)


def _parse_grid(spec: str):
    """'0:2:16' -> start:step:stop inclusive; '12' -> [12.0]."""
    parts = spec.split(":")
    if len(parts) == 1:
        return [float(parts[0])]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"bad grid {spec!r}, want start:step:stop")
    start, step, stop = map(float, parts)
    if step <= 0:
        raise argparse.ArgumentTypeError("grid step must be positive")
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [start + i * step for i in range(n)]


def _fmt(x: float) -> str:
    return f"{x:.10g}"


# ---------------------------------------------------------------- complexity

def cmd_complexity(args) -> int:
    rows = []
    n1_base = args.n1
    for lam in (1, 2, 6):
        n1 = n1_base // lam
        rep = chirp_mod.mf_op_count(n1)
        ref = TABLE2[("mf", lam)]
        rows.append(_complexity_row("mf", lam, rep, ref))
    n1 = n1_base // 6
    rep = chirp_mod.dnn_op_count(n1)
    ref = TABLE2[("dnn", 6)]
    rows.append(_complexity_row("dnn", 6, rep, ref))
    # advantage over the DNN, from the published totals
    dnn_total = TABLE2[("dnn", 6)]["total"]
    for lam in (1, 2, 6):
        mf_total = TABLE2[("mf", lam)]["total"]
        adv = 100.0 * (mf_total - dnn_total) / dnn_total
        rows.append([f"advantage_mf{lam}", lam, "", "", "", "", "", "", "",
                     f"{adv:.1f}%", ""])
    header = ["detector", "lambda", "add", "mul", "nav", "total",
              "table_add", "table_mul", "table_total", "advantage",
              "mismatch_flags"]
    _emit(args.out, args, rows, header)
    return EXIT_OK


def _complexity_row(det, lam, rep, ref):
    flags = []
    if rep.additions != ref["add"]:
        flags.append("add")
    if rep.multiplications != ref["mul"]:
        flags.append("mul")
    if ref["nav"] is not None and rep.nonlinear_activations != ref["nav"]:
        flags.append("nav")
    if rep.total != ref["total"]:
        flags.append("total")
    return [det, lam, rep.additions, rep.multiplications,
            rep.nonlinear_activations, rep.total,
            ref["add"], ref["mul"], ref["total"], "",
            ";".join(flags)]


# --------------------------------------------------------------------- bound

def cmd_bound(args) -> int:
    rows = []
    any_invalid = False
    for t0 in args.t0:
        c = bound_mod.SmoothnessConstants(
            mu=args.mu, H=args.big_h, rho=args.rho, B=args.b,
            delta=args.delta, sigma=args.sigma, alpha=args.alpha,
            beta=args.beta, C=args.c, tau=args.tau, N=args.n_nodes,
            T0=t0, n=args.gap0, epsilon=args.epsilon)
        d = bound_mod.derive_constants(c, args.xi_variant)
        if d.valid:
            try:
                tz = bound_mod.tz_bound(c, args.xi_variant)
                tz_str = _fmt(tz)
                flags = ""
            except ValidityError as exc:
                tz_str, flags = "", str(exc)
                any_invalid = True
        else:
            tz_str, flags = "", ";".join(d.flags)
            any_invalid = True
        m_str = ""
        if 0 < d.beta * d.H_p < 1:
            m_str = _fmt(bound_mod.m_of_T(d, t0))
        rows.append([t0, _fmt(d.mu_p), _fmt(d.H_p), _fmt(d.mu_pp),
                     _fmt(d.H_pp), _fmt(d.alpha_p), _fmt(d.xi),
                     m_str, tz_str, flags])
    header = ["t0", "mu_p", "h_p", "mu_pp", "h_pp", "alpha_p", "xi",
              "m_t0", "tz", "validity_flags"]
    _emit(args.out, args, rows, header)
    return EXIT_VALIDITY if any_invalid else EXIT_OK


# ----------------------------------------------------------------- ber-sweep

def _clean_received_symbol(bit, params, sto, speed):
    """Noise-free impaired symbol at the downsampled rate."""
    tx = chirp_mod.generate_chirp(params, "down" if bit else "up")
    w = tx
    alpha = speed / 1500.0
    if alpha:
        w = channel_mod.apply_doppler(w, alpha)
    if sto:
        w = channel_mod.apply_sto(w, sto)
    return chirp_mod.downsample(w, params.lam).samples


def ber_monte_carlo(params, detector, ebn0_db, sto, speed, trials, seed,
                    checkpoint_params=None, chunk=20000):
    """Empirical BER: clean impaired symbols plus receiver-side AWGN.

    Noise level follows the binary-orthogonal convention: per-sample sigma =
    sqrt(Eb / (2 * ebn0)) with Eb the full-rate symbol energy.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, int(ebn0_db * 1000) & 0x7FFFFFFF]))
    s_clean = [_clean_received_symbol(b, params, sto, speed) for b in (0, 1)]
    eb = float(np.sum(chirp_mod.generate_chirp(params, "up").samples ** 2))
    sigma = math.sqrt(eb / (2.0 * 10.0 ** (ebn0_db / 10.0)))
    n1 = params.n1
    errors = 0
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        bits = rng.integers(0, 2, size=m)
        rx = np.where(bits[:, None] == 0, s_clean[0], s_clean[1])
        rx = rx + rng.standard_normal((m, n1)) * sigma
        if detector == "mf":
            dec = chirp_mod.matched_filter_detect_batch(rx, params)
        else:
            dec = recv_mod.detect_batch(checkpoint_params, rx)
        errors += int(np.sum(dec != bits))
        done += m
    return errors / trials


def _wilson_half_width(ber, trials):
    if trials == 0:
        return 0.0
    z = 1.959963984540054
    denom = 1 + z * z / trials
    center = (ber + z * z / (2 * trials)) / denom
    half = z * math.sqrt(ber * (1 - ber) / trials + z * z / (4 * trials ** 2)) / denom
    return half


def cmd_ber_sweep(args) -> int:
    detectors = args.detector.split(",")
    ckpt = None
    if "dnn" in detectors:
        if not args.checkpoint:
            print("ber-sweep: --checkpoint is required when detector includes dnn",
                  file=sys.stderr)
            return EXIT_USAGE
        ckpt = recv_mod.load_params(args.checkpoint)
    params = chirp_mod.ChirpParams(lam=args.lam)
    rows = []
    for snr in args.snr_db:
        for det in detectors:
            if args.trials > 0:
                ber = ber_monte_carlo(params, det, snr, args.sto, args.speed,
                                      args.trials, args.seed,
                                      checkpoint_params=ckpt)
                half = _wilson_half_width(ber, args.trials)
                rows.append([_fmt(snr), det, args.lam, _fmt(args.sto),
                             _fmt(args.speed), _fmt(ber), args.trials, _fmt(half)])
    header = ["snr_db", "detector", "lambda", "sto", "speed", "ber", "trials",
              "wilson95_half_width"]
    _emit(args.out, args, rows, header)
    return EXIT_OK


# ------------------------------------------------------------------ gen-data

def _spec_from_args(args, seed) -> data_mod.DatasetSpec:
    return data_mod.DatasetSpec(
        n_symbols=args.symbols,
        split=args.split,
        chirp=chirp_mod.ChirpParams(lam=args.lam),
        snr_db_range=tuple(args.snr_range),
        sto_range=tuple(args.sto_range),
        speed_range=tuple(args.speed_range),
        channel_tag=args.channel,
        seed=seed)


def cmd_gen_data(args) -> int:
    spec = _spec_from_args(args, args.seed)
    train, test = data_mod.build_node_dataset(spec)
    data_mod.save_dataset(args.out, train, test, spec)
    return EXIT_OK


# -------------------------------------------------------------- train-single

def cmd_train_single(args) -> int:
    train, test, spec = data_mod.load_dataset(args.data)
    n1 = train.batch.inputs.shape[1]
    h1, h2 = recv_mod.default_hidden(n1)
    rng = np.random.default_rng(args.seed)
    p = recv_mod.init_params([n1, h1, h2, 1], rng)
    p = recv_mod.train(p, train.batch, epochs=args.epochs, lr=args.lr,
                       batch_size=args.batch_size, rng=rng)
    recv_mod.save_params(args.out, p)
    ber = recv_mod.ber_eval(p, test.batch)
    print(f"test BER {ber:.6f} on {len(test.batch)} held-out symbols")
    return EXIT_OK


# ------------------------------------------------------------------- run-fed

def _parse_group(text: str) -> dict:
    """'count=3,sto=0:60,snr=6:12,speed=0:0' -> field dict."""
    out = {"count": 1, "sto": (0.0, 0.0), "snr": (np.inf, np.inf),
           "speed": (0.0, 0.0)}
    for part in text.split(","):
        key, _, val = part.partition("=")
        key = key.strip()
        if key == "count":
            out["count"] = int(val)
        elif key in ("sto", "snr", "speed"):
            lo, _, hi = val.partition(":")
            out[key] = (float(lo), float(hi or lo))
        else:
            raise argparse.ArgumentTypeError(f"unknown group field {key!r}")
    return out


def build_group_nodes(groups, lam, symbols, split, seed, theta):
    nodes = []
    nid = 0
    for gi, g in enumerate(groups):
        for _ in range(g["count"]):
            spec = data_mod.DatasetSpec(
                n_symbols=symbols, split=split,
                chirp=chirp_mod.ChirpParams(lam=lam),
                snr_db_range=g["snr"], sto_range=g["sto"],
                speed_range=g["speed"],
                seed=int(np.random.default_rng(
                    np.random.SeedSequence([seed, gi, nid])).integers(2 ** 31)))
            train, test = data_mod.build_node_dataset(spec)
            nodes.append(fed_mod.NodeState(nid, theta, train.batch, test.batch))
            nid += 1
    return nodes


def cmd_run_fed(args) -> int:
    groups = [_parse_group(g) for g in args.group] or [_parse_group("count=1")]
    k = sum(g["count"] for g in groups)
    cfg = fed_mod.FmlConfig(K=k, G=args.g, alpha=args.alpha, beta=args.beta,
                            T0=args.t0, rounds=args.rounds,
                            p_decode=args.p_decode, seed=args.seed)
    params = chirp_mod.ChirpParams(lam=args.lam)
    h1, h2 = recv_mod.default_hidden(params.n1)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 0x1417]))
    theta = recv_mod.init_params([params.n1, h1, h2, 1], rng)
    nodes = build_group_nodes(groups, args.lam, args.symbols, args.split,
                              args.seed, theta)
    logs, _ = fed_mod.run_rounds(cfg, nodes, args.mode)
    rows = [[log.round_index,
             ";".join(str(i) for i in log.scheduled),
             ";".join(str(i) for i in log.successful),
             _fmt(log.train_loss), _fmt(log.test_acc), _fmt(log.adapted_acc)]
            for log in logs]
    header = ["round", "scheduled", "successful", "train_loss", "test_acc",
              "adapted_acc"]
    _emit(args.out, args, rows, header)
    return EXIT_OK


# ----------------------------------------------------------------------- cir

def cmd_cir(args) -> int:
    if args.action == "generate":
        cfg = channel_mod.RayleighModelConfig(fd=args.fd, Ts=args.ts)
        h = channel_mod.rayleigh_cir(cfg, args.duration, args.fs, args.seed)
        channel_mod.save_cir(args.out, h)
        return EXIT_OK
    h = channel_mod.load_cir(args.path)
    rows = [[h.n_taps, h.n_time, _fmt(h.Ts),
             ";".join(f"{k}={v}" for k, v in sorted(h.meta.items()))]]
    _emit(args.out, args, rows, ["taps", "time_steps", "ts_s", "meta"])
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chirpfed",
        description="Underwater chirp link, C-DNN receiver and federated "
                    "meta-learning experiment driver")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.add_argument("--seed", type=int, required=True,
                       help="master RNG seed (required; no silent default)")
        p.add_argument("--out", default="-", help="output CSV path or - for stdout")
        p.set_defaults(func=fn)
        return p

    p = add("complexity", cmd_complexity, help="operation-count table")
    p.add_argument("--n1", type=int, default=960,
                   help="full-rate samples per symbol")

    p = add("bound", cmd_bound, help="convergence-bound table")
    p.add_argument("--mu", type=float, required=True)
    p.add_argument("--big-h", type=float, required=True, dest="big_h",
                   metavar="H", help="smoothness modulus")
    p.add_argument("--rho", type=float, default=0.0)
    p.add_argument("--b", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=0.0)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--alpha", type=float, default=0.001)
    p.add_argument("--beta", type=float, default=0.0001)
    p.add_argument("--c", type=float, default=0.0)
    p.add_argument("--tau", type=float, default=0.0)
    p.add_argument("--n-nodes", type=int, default=10)
    p.add_argument("--t0", type=lambda s: [int(x) for x in s.split(",")],
                   default=[1, 5, 10], help="comma-separated local-epoch list")
    p.add_argument("--gap0", type=float, default=1.0,
                   help="initial optimality-gap bound")
    p.add_argument("--epsilon", type=float, default=0.01)
    p.add_argument("--xi-variant", choices=bound_mod.XI_VARIANTS, default="proof")

    p = add("ber-sweep", cmd_ber_sweep, help="Monte-Carlo BER grid")
    p.add_argument("--snr-db", type=_parse_grid, default=[6.0, 9.0, 12.0],
                   help="Eb/N0 grid start:step:stop in dB")
    p.add_argument("--detector", default="mf", help="comma list: mf,dnn")
    p.add_argument("--lambda", dest="lam", type=int, default=1)
    p.add_argument("--sto", type=float, default=0.0,
                   help="symbol time offset in full-rate samples")
    p.add_argument("--speed", type=float, default=0.0, help="relative speed m/s")
    p.add_argument("--trials", type=int, default=100000)
    p.add_argument("--checkpoint", help="C-DNN checkpoint for detector=dnn")

    p = add("gen-data", cmd_gen_data, help="synthesize one node dataset")
    p.add_argument("--symbols", type=int, default=1250)
    p.add_argument("--split", type=float, default=0.8)
    p.add_argument("--lambda", dest="lam", type=int, default=6)
    p.add_argument("--snr-range", type=float, nargs=2, default=[np.inf, np.inf])
    p.add_argument("--sto-range", type=float, nargs=2, default=[0.0, 0.0])
    p.add_argument("--speed-range", type=float, nargs=2, default=[0.0, 0.0])
    p.add_argument("--channel", choices=data_mod.CHANNEL_TAGS, default="identity")

    p = add("train-single", cmd_train_single, help="train a C-DNN on one dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)

    p = add("run-fed", cmd_run_fed, help="federated (meta) learning rounds")
    p.add_argument("--mode", choices=["fml", "fl"], default="fml")
    p.add_argument("--group", action="append", default=[],
                   help="node group, e.g. count=3,sto=0:60,snr=6:12")
    p.add_argument("--g", type=float, default=0.3, help="scheduling ratio G")
    p.add_argument("--t0", type=int, default=1)
    p.add_argument("--rounds", type=int, default=50)
    p.add_argument("--alpha", type=float, default=0.001)
    p.add_argument("--beta", type=float, default=0.0001)
    p.add_argument("--p-decode", type=float, default=1.0)
    p.add_argument("--lambda", dest="lam", type=int, default=6)
    p.add_argument("--symbols", type=int, default=1250)
    p.add_argument("--split", type=float, default=0.8)

    p = add("cir", cmd_cir, help="generate or inspect CIR files")
    p.add_argument("action", choices=["generate", "inspect"])
    p.add_argument("--path", help="CIR file to inspect")
    p.add_argument("--fd", type=float, default=10.0)
    p.add_argument("--ts", type=float, default=0.001)
    p.add_argument("--duration", type=float, default=1.0)
    p.add_argument("--fs", type=float, default=1000.0)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidityError as exc:
        print(f"chirpfed: validity error: {exc}", file=sys.stderr)
        return EXIT_VALIDITY
    except TrainingError as exc:
        print(f"chirpfed: training error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ChirpfedError as exc:
        print(f"chirpfed: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"chirpfed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
