"""Command line front end tying the pipeline together.

One binary with subcommands: generate/train toy victims, analyze
sensitivity, compile the rewiring artifacts, validate blobs, run the cycle
simulator, run attacks, and render overhead/robustness reports.  Every
command is deterministic given its seed and writes only the declared file
formats (model blobs, map/shadow blobs, JSON reports, JSONL traces).

Options resolve as: command-line flags > --config file entries > defaults.
The config file is flat ``key = value`` text, keys matching the long option
names with underscores.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import attack as atk
from . import compiler, dpe, fp16, models, system
from .formats import BlobError


class CliError(Exception):
    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        self.detail = detail
        super().__init__(f"{reason}: {detail}" if detail else reason)


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def parse_config_file(path: str, allowed: dict) -> dict:
    """Flat ``key = value`` file; keys must be known options of the command."""
    out = {}
    for ln, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError("config", f"{path}:{ln}: expected key = value")
        key, _, value = line.partition("=")
        key, value = key.strip().replace("-", "_"), value.strip()
        if key not in allowed:
            raise CliError("config", f"{path}:{ln}: unknown key {key!r}")
        ref = allowed[key]
        if isinstance(ref, bool):
            out[key] = parse_bool(value)
        elif isinstance(ref, int):
            out[key] = int(value)
        elif isinstance(ref, float):
            out[key] = float(value)
        else:
            out[key] = value
    return out


def resolve(ns: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    opts = dict(defaults)
    given = {k: v for k, v in vars(ns).items() if k not in ("func", "config")}
    if getattr(ns, "config", None):
        opts.update(parse_config_file(ns.config, defaults))
    opts.update(given)
    return opts


def add_options(p: argparse.ArgumentParser, defaults: dict, helps: dict):
    p.add_argument("--config", help="flat key = value config file")
    for key, ref in defaults.items():
        flag = "--" + key.replace("_", "-")
        kw = {"default": argparse.SUPPRESS, "help": f"{helps[key]} (default: {ref})"}
        if isinstance(ref, bool):
            p.add_argument(flag, type=parse_bool, **kw)
        elif isinstance(ref, (int, float)):
            p.add_argument(flag, type=type(ref), **kw)
        else:
            p.add_argument(flag, **kw)


def write_bytes(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


def write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def load_model_file(path: str) -> models.ToyNetwork:
    try:
        return models.load_model(Path(path).read_bytes())
    except FileNotFoundError:
        raise CliError("missing", path)
    except BlobError as e:
        raise CliError(e.reason, f"{path}: invalid model blob")


def get_task(name: str) -> models.TaskSpec:
    if name not in models.BUNDLED_TASKS:
        raise CliError("config", f"unknown task {name!r}; have {sorted(models.BUNDLED_TASKS)}")
    return models.BUNDLED_TASKS[name]


# --- commands ----------------------------------------------------------------

GEN_DEFAULTS = dict(dims="16,16,3", seed=0, out="model.fmdl")
GEN_HELP = dict(dims="comma-separated layer widths", seed="init seed",
                out="output model file")


def cmd_gen(ns):
    o = resolve(ns, GEN_DEFAULTS)
    dims = [int(d) for d in o["dims"].split(",")]
    net = models.init_network(dims, seed=o["seed"])
    write_bytes(Path(o["out"]), models.save_model(net))
    print(f"wrote {o['out']} ({len(dims) - 1} layers, dims {dims})")
    return 0


TRAIN_DEFAULTS = dict(task="clusters3", hidden=16, epochs=150, learning_rate=0.5,
                      seed=0, out="trained.fmdl")
TRAIN_HELP = dict(task="bundled task name", hidden="hidden width",
                  epochs="training epochs", learning_rate="gradient step size",
                  seed="init/shuffle seed", out="output model file")


def cmd_train(ns):
    o = resolve(ns, TRAIN_DEFAULTS)
    spec = get_task(o["task"])
    data = models.synth_dataset(spec)
    net = models.init_network([spec.dim, o["hidden"], spec.classes], seed=o["seed"])
    net = models.train_toy(net, data.train, o["epochs"], o["learning_rate"])
    acc = models.accuracy(net, data.attack)
    write_bytes(Path(o["out"]), models.save_model(net))
    print(f"wrote {o['out']} (held-out accuracy {acc:.3f})")
    return 0


ANALYZE_DEFAULTS = dict(model="trained.fmdl", task="clusters3", out="analysis.json")
ANALYZE_HELP = dict(model="model file", task="bundled task name", out="output JSON")


def cmd_analyze(ns):
    o = resolve(ns, ANALYZE_DEFAULTS)
    net = load_model_file(o["model"])
    data = models.synth_dataset(get_task(o["task"]))
    report = models.loss_and_gradients(net, data.train)
    layers = []
    for st in report.layers:
        ranking = compiler.rank_sensitivity(st)
        dead = ranking.deadness <= 0.01 * float(np.mean(ranking.deadness))
        layers.append({
            "top_lane_per_row": [int(l) for l in ranking.order[:, 0]],
            "deadness": [float(v) for v in ranking.deadness],
            "dead_lanes": [int(l) for l in np.flatnonzero(dead)],
            "saliency_max": float(ranking.scores.max()),
        })
    out = {"loss": report.loss, "accuracy": report.accuracy, "layers": layers}
    write_text(Path(o["out"]), json.dumps(out, sort_keys=True, indent=2) + "\n")
    print(f"wrote {o['out']}")
    return 0


COMPILE_DEFAULTS = dict(model="trained.fmdl", task="clusters3", budget=0.15, div=2,
                        deadness_threshold=0.01, skips=False, out_dir="far_out")
COMPILE_HELP = dict(model="model file", task="analysis batch task",
                    budget="per-row entry budget as a fraction of fan-in",
                    div="division factor (2 or 3)",
                    deadness_threshold="dead lane cutoff, fraction of mean |activation|",
                    skips="emit skip entries for leftover dead lanes",
                    out_dir="artifact directory")


def cmd_far_compile(ns):
    o = resolve(ns, COMPILE_DEFAULTS)
    net = load_model_file(o["model"])
    data = models.synth_dataset(get_task(o["task"]))
    try:
        cfg = compiler.CompilerConfig(budget_fraction=o["budget"], div=o["div"],
                                      deadness_rel_threshold=o["deadness_threshold"],
                                      emit_skips=o["skips"])
    except ValueError as e:
        raise CliError("config", str(e))
    hardened, outcomes = compiler.harden_network(net, data.train, cfg)
    out_dir = Path(o["out_dir"])
    summary = []
    for i, (h, oc) in enumerate(zip(hardened, outcomes)):
        fmap, fshd = compiler.emit_blobs(h)
        write_bytes(out_dir / f"layer{i}.fmap", fmap)
        write_bytes(out_dir / f"layer{i}.fshd", fshd)
        summary.append({
            "layer": i,
            "entries": len(h.farmap.entries),
            "groups": sum(1 for e in h.farmap.entries
                          if e.action == compiler.REWIRE and e.lane == e.donor),
            "shadow_words": len(h.shadow),
            "rows_unhardened": sum(1 for r in oc if r.reason),
            "fmap_bytes": len(fmap),
            "fshd_bytes": len(fshd),
        })
    dram_net = models.ToyNetwork(
        [models.LinearLayer(h.dram_weights, h.layer.bias, h.layer.activation)
         for h in hardened], net.class_count)
    write_bytes(out_dir / "hardened.fmdl", models.save_model(dram_net))
    write_text(out_dir / "compile_report.json",
               json.dumps({"config": {"budget": o["budget"], "div": o["div"]},
                           "layers": summary}, sort_keys=True, indent=2) + "\n")
    print(f"wrote {out_dir}/ (hardened.fmdl, {len(hardened)} blob pairs)")
    return 0


VALIDATE_DEFAULTS = dict(fmap="layer0.fmap", fshd="layer0.fshd", budget=0.15)
VALIDATE_HELP = dict(fmap="map blob path", fshd="shadow blob path",
                     budget="row budget fraction the validator enforces")


def cmd_validate(ns):
    o = resolve(ns, VALIDATE_DEFAULTS)
    try:
        fmap = Path(o["fmap"]).read_bytes()
        fshd = Path(o["fshd"]).read_bytes()
    except FileNotFoundError as e:
        raise CliError("missing", str(e.filename))
    decision = system.validate_and_enable(fmap, fshd, o["budget"])
    print(json.dumps({"enabled": decision.enabled, "reason": decision.reason},
                     sort_keys=True))
    return 0 if decision.enabled else 3


SIM_DEFAULTS = dict(mode="tile", far=True, overlap=True, dual_port=True, seed=0,
                    model="", hardened_dir="", rows=32, out="")
SIM_HELP = dict(mode="'tile' for one 32x32 tile, 'layer' for a model layer GEMM",
                far="exercise the rewiring path",
                overlap="hide select synthesis behind the previous row",
                dual_port="independent baseline/shadow read ports",
                seed="tile content seed", model="model file (layer mode)",
                hardened_dir="far-compile output directory (layer mode)",
                rows="streamed activation rows (layer mode)",
                out="optional JSON report path")


def _random_tile_case(seed):
    rng = np.random.default_rng(seed)
    act = fp16.encode_array(rng.normal(size=(32, 32)))
    wt = fp16.encode_array(rng.normal(size=(32, 32)))
    shadow = compiler.ShadowStore(fp16.encode_array(rng.normal(size=8)))
    entries = []
    for r in range(32):
        c = int(rng.integers(0, 16)) * 2
        addr = int(rng.integers(0, 8))
        entries.append(compiler.FarMapEntry(r, c, compiler.REWIRE, c, 2, addr))
        entries.append(compiler.FarMapEntry(r, c + 1, compiler.REWIRE, c, 2, addr))
    return act, wt, entries, shadow


def _load_hardened_dir(net: models.ToyNetwork, dir_path: str) -> list:
    out = []
    for i, layer in enumerate(net.layers):
        fmap_p = Path(dir_path) / f"layer{i}.fmap"
        fshd_p = Path(dir_path) / f"layer{i}.fshd"
        if not fmap_p.exists() or not fshd_p.exists():
            out.append(layer)
            continue
        decision = system.validate_and_enable(fmap_p.read_bytes(), fshd_p.read_bytes())
        if not decision.enabled:
            print(f"layer {i}: blobs rejected ({decision.reason}); baseline fallback",
                  file=sys.stderr)
            out.append(layer)
            continue
        out.append(compiler.HardenedLayer(layer, layer.weights.copy(),
                                          decision.farmap, decision.shadow))
    return out


def cmd_simulate(ns):
    o = resolve(ns, SIM_DEFAULTS)
    cfg = dpe.DpeConfig(overlap_select=o["overlap"], dual_port_weights=o["dual_port"])
    if o["mode"] == "tile":
        act, wt, entries, shadow = _random_tile_case(o["seed"])
        if not o["far"]:
            entries, shadow = None, None
        try:
            _, rep = dpe.run_tile(act, wt, entries, shadow, cfg)
        except dpe.FarValidationError as e:
            raise CliError(e.reason, "tile simulation aborted; baseline fallback required")
        report = {"mode": "tile", "far": o["far"], "overlap": o["overlap"],
                  "dual_port": o["dual_port"], **asdict_report(rep)}
    elif o["mode"] == "layer":
        if not o["model"]:
            raise CliError("config", "layer mode needs --model")
        net = load_model_file(o["model"])
        layers = _load_hardened_dir(net, o["hardened_dir"]) if o["hardened_dir"] \
            else list(net.layers)
        rng = np.random.default_rng(o["seed"])
        total = dpe.CycleReport()
        per_layer = []
        x = fp16.encode_array(rng.normal(size=(o["rows"], net.layers[0].fan_in)))
        for i, layer in enumerate(layers):
            try:
                y, rep = dpe.run_layer(x, layer, cfg)
            except dpe.FarValidationError as e:
                raise CliError(e.reason, f"layer {i} aborted; baseline fallback required")
            total += rep
            per_layer.append({"layer": i, **asdict_report(rep)})
            x = y
        report = {"mode": "layer", "model": o["model"], "rows": o["rows"],
                  "per_layer": per_layer, **asdict_report(total)}
    else:
        raise CliError("config", f"unknown mode {o['mode']!r}")
    print(f"total_cycles: {report['total_cycles']}")
    print(f"dots_retired: {report['dots_retired']}  stall_cycles: {report['stall_cycles']}")
    if o["out"]:
        write_text(Path(o["out"]), json.dumps(report, sort_keys=True, indent=2) + "\n")
    return 0


def asdict_report(rep: dpe.CycleReport) -> dict:
    return {"total_cycles": rep.total_cycles, "dots_retired": rep.dots_retired,
            "select_synthesis_cycles": rep.select_synthesis_cycles,
            "overlapped_select_cycles": rep.overlapped_select_cycles,
            "stall_cycles": rep.stall_cycles,
            "steady_state_issue_rate": rep.steady_state_issue_rate}


ATTACK_DEFAULTS = dict(model="trained.fmdl", task="clusters3", hardened_dir="",
                       view="vanilla_over_dram", top_n=6, flip_budget=40,
                       accuracy_below=0.43, batch_size=96, seed=0,
                       mode="pbs", out="trace.jsonl")
ATTACK_HELP = dict(model="victim model file", task="task supplying the attack split",
                   hardened_dir="far-compile artifacts; empty attacks the plain model",
                   view="attacker view: vanilla_over_dram or far_aware",
                   top_n="candidates per layer per iteration",
                   flip_budget="maximum committed flips",
                   accuracy_below="objective: stop once accuracy drops below this",
                   batch_size="attack batch subsample", seed="attack seed",
                   mode="'pbs' or 'random'", out="trace output (JSON lines)")


def cmd_attack(ns):
    o = resolve(ns, ATTACK_DEFAULTS)
    net = load_model_file(o["model"])
    data = models.synth_dataset(get_task(o["task"]))
    if o["hardened_dir"]:
        layers = _load_hardened_dir(net, o["hardened_dir"])
        target = atk.AttackTarget(
            [l if isinstance(l, compiler.HardenedLayer) else l.copy() for l in layers],
            net.class_count)
    else:
        target = atk.AttackTarget.from_network(net)
    try:
        cfg = atk.AttackConfig(top_n=o["top_n"], flip_budget=o["flip_budget"],
                               objective=atk.Objective(accuracy_below=o["accuracy_below"]),
                               attacker_view=o["view"], seed=o["seed"],
                               batch_size=o["batch_size"] or None)
    except ValueError as e:
        raise CliError("config", str(e))
    run = atk.run_attack if o["mode"] == "pbs" else atk.random_attack
    if o["mode"] not in ("pbs", "random"):
        raise CliError("config", f"unknown attack mode {o['mode']!r}")
    trace = run(target, data.attack, cfg)
    write_text(Path(o["out"]), atk.trace_to_jsonl(trace, cfg))
    print(f"flips={len(trace.flips)} success={trace.success} "
          f"accuracy {trace.initial_accuracy:.3f} -> {trace.final_accuracy:.3f}")
    return 0


REPORT_DEFAULTS = dict(models="mnist,cifar10,cifar100", budget=0.15, div=2,
                       overlap=True, pe_count=4, dma_bytes_per_cycle=64.0,
                       baseline_trace="", hardened_trace="", out_dir="reports")
REPORT_HELP = dict(models="comma-separated model shapes",
                   budget="rewiring budget fraction", div="division factor",
                   overlap="overlapped select synthesis", pe_count="engines",
                   dma_bytes_per_cycle="DMA bandwidth",
                   baseline_trace="comma-separated baseline attack traces",
                   hardened_trace="comma-separated hardened attack traces",
                   out_dir="report directory")


def _overhead_table(names, budget, div, overlap, cfg) -> tuple[str, dict]:
    rows = []
    for name in names:
        if name not in system.TABLE_MODELS:
            raise CliError("config", f"unknown model shape {name!r}")
        rep = system.model_latency_report(system.TABLE_MODELS[name], budget, div,
                                          overlap, cfg)
        rows.append((name, rep["totals"]))
    lines = [f"{'':<14}{'baseline':>10}{'hardened':>10}",
             f"{'matmul':<14}{1.0:>10.3f}{rows[0][1]['matmul_overhead_ratio']:>10.3f}"]
    for name, totals in rows:
        lines.append(f"{name:<14}{1.0:>10.3f}{totals['end_to_end_ratio']:>10.3f}")
    table = {"budget": budget, "div": div, "overlap": overlap,
             "matmul_overhead_ratio": rows[0][1]["matmul_overhead_ratio"],
             "models": {name: totals for name, totals in rows}}
    return "\n".join(lines) + "\n", table


def _robustness_table(baseline_paths, hardened_paths, budget_default=40):
    def flips_of(paths):
        out = []
        for p in paths:
            trace, header = atk.trace_from_jsonl(Path(p).read_text())
            out.append(len(trace.flips) if trace.success else header["flip_budget"])
        return out

    base = flips_of(baseline_paths)
    hard = flips_of(hardened_paths)
    bm, hm = float(np.median(base)), float(np.median(hard))
    ratio = hm / bm if bm else float("inf")
    text = (f"{'':<14}{'baseline':>10}{'hardened':>10}\n"
            f"{'median flips':<14}{bm:>10.1f}{hm:>10.1f}\n"
            f"robustness ratio: {ratio:.2f} (reference band from full-scale "
            f"results: 1.4-4.2)\n")
    return text, {"baseline_flips": base, "hardened_flips": hard,
                  "baseline_median": bm, "hardened_median": hm, "ratio": ratio,
                  "reference_band": [1.4, 4.2]}


def cmd_report(ns):
    o = resolve(ns, REPORT_DEFAULTS)
    names = [n for n in o["models"].split(",") if n]
    cfg = system.SystemConfig(pe_count=o["pe_count"],
                              dma_bytes_per_cycle=o["dma_bytes_per_cycle"])
    text, table = _overhead_table(names, o["budget"], o["div"], o["overlap"], cfg)
    out_dir = Path(o["out_dir"])
    report = {"overhead": table}
    print("modeled latency ratios")
    print(text, end="")
    if o["baseline_trace"] and o["hardened_trace"]:
        rtext, rtable = _robustness_table(o["baseline_trace"].split(","),
                                          o["hardened_trace"].split(","))
        print("\nrobustness (flips to objective)")
        print(rtext, end="")
        report["robustness"] = rtable
    write_text(out_dir / "report.json",
               json.dumps(report, sort_keys=True, indent=2) + "\n")
    write_text(out_dir / "report.txt", text)
    print(f"\nwrote {out_dir}/report.json")
    return 0


# --- entry point ---------------------------------------------------------------

COMMANDS = [
    ("gen", cmd_gen, GEN_DEFAULTS, GEN_HELP, "generate an untrained toy model"),
    ("train", cmd_train, TRAIN_DEFAULTS, TRAIN_HELP, "train a toy victim on a bundled task"),
    ("analyze", cmd_analyze, ANALYZE_DEFAULTS, ANALYZE_HELP, "sensitivity/deadness analysis"),
    ("far-compile", cmd_far_compile, COMPILE_DEFAULTS, COMPILE_HELP,
     "compile rewiring maps, shadow store and hardened weights"),
    ("validate", cmd_validate, VALIDATE_DEFAULTS, VALIDATE_HELP,
     "validate a map/shadow blob pair"),
    ("simulate", cmd_simulate, SIM_DEFAULTS, SIM_HELP, "run the cycle-level engine"),
    ("attack", cmd_attack, ATTACK_DEFAULTS, ATTACK_HELP, "progressive bit search"),
    ("report", cmd_report, REPORT_DEFAULTS, REPORT_HELP,
     "overhead and robustness tables"),
]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="farbench",
        description="workbench for rewiring-hardened binary16 linear layers")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, defaults, helps, desc in COMMANDS:
        p = sub.add_parser(name, help=desc, description=desc)
        add_options(p, defaults, helps)
        p.set_defaults(func=fn)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        return ns.func(ns)
    except CliError as e:
        print(json.dumps({"error": e.reason, "detail": e.detail}, sort_keys=True),
              file=sys.stderr)
        return 1
    except BlobError as e:
        print(json.dumps({"error": e.reason, "detail": str(e)}, sort_keys=True),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
