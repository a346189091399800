"""Command-line entry point: probe, classify, edit, invert, report.

Every command is driven by a manifest (a JSON object). Flags build one;
``--manifest PATH`` replaces the flags entirely. The fully resolved manifest
(every default filled in) is written to ``run.json`` in the output directory
and can be fed back with ``--manifest`` to reproduce the run. ``out`` and
``jobs`` are runtime options and are not part of the manifest.

Manifest keys
-------------
common
    command, preset ("toy" | "flux"), config (path or inline object),
    weights (path or null), model_seed, seed, params
probe
    prompts (corpus path, one prompt per line), seeds, manipulations,
    layers (null = all), steps
classify
    aggregate (CSV path), p_frac, c_frac
edit
    task (object_addition | non_rigid | background | move | outpaint),
    prompt_src, prompt_edit, layer_sets (JSON path) or P / C lists, steps,
    R, B, threshold, connectivity, object_token, fg_token, n_points,
    offset [dr, dc], object_mask (PBM path) or move_token,
    paste_offset [r, c], src_size [h, w]
invert
    prompt, latent (path; omitted -> sample from seed first),
    reference_noise (path), steps
report
    aggregate and/or rows (probe CSVs), layer_sets, edit_dir

Exit codes: 0 success, 2 bad input or configuration, 3 method failure
(an attention-reasoning mask came out empty).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import editing as E
from . import formats, mmdit
from .errors import ReasoningError, RopeditError
from .masks import DEFAULT_THRESHOLD, IdentityRefiner
from .numerics import checksum
from .presets import PRESETS, get_preset
from .probe import (
    LayerSets,
    ProbeReport,
    ProbeRow,
    ProbeSpec,
    classify_layers,
    default_battery,
    psnr,
    read_aggregate_csv,
    run_probe,
)
from .rope import Manipulation

log = logging.getLogger("ropedit")

EXIT_OK, EXIT_INPUT, EXIT_FAILURE = 0, 2, 3
TASKS = ("object_addition", "non_rigid", "background", "move", "outpaint")


class UsageError(RopeditError):
    pass


# ------------------------------------------------------------------ helpers


def _write_text(path: Path, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def _write_json(path: Path, obj):
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise UsageError(f"file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON ({e})") from None


def _require(params, key):
    if params.get(key) in (None, ""):
        raise UsageError(f"missing required parameter '{key}'")
    return params[key]


def _existing(path, what):
    if path is None or not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


# ------------------------------------------------------------------ manifest


def resolve_common(manifest: dict) -> tuple:
    """Fill shared defaults; returns ``(manifest, model)``."""
    m = dict(manifest)
    preset = m.get("preset") or "toy"
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    m["preset"] = preset
    m["preset_values"] = get_preset(preset)
    cfg_src = m.get("config")
    if isinstance(cfg_src, str):
        cfg_src = _read_json(cfg_src)
    cfg = mmdit.ModelConfig.from_dict(cfg_src or {})
    m["model_seed"] = int(m.get("model_seed") or 0)
    weights = m.get("weights")
    if weights:
        model = mmdit.load_weights(_existing(weights, "weights file"))
        if cfg_src and model.cfg != cfg:
            raise UsageError("config does not match the config stored in the weights file")
        cfg = model.cfg
    else:
        model = mmdit.init_model(cfg, m["model_seed"])
    m["weights"] = weights or None
    m["config"] = cfg.to_dict()
    m["seed"] = int(m.get("seed") or 0)
    m["params"] = dict(m.get("params") or {})
    return m, model


def _prune(params: dict) -> dict:
    return {k: v for k, v in params.items() if v is not None}


# ------------------------------------------------------------------ commands


def cmd_probe(m: dict, model, out: Path, jobs: int = 1):
    p = m["params"]
    corpus = _existing(_require(p, "prompts"), "prompt corpus")
    with open(corpus, encoding="utf-8") as f:
        prompts = [line.strip() for line in f if line.strip()]
    if not prompts:
        raise UsageError(f"prompt corpus {corpus} is empty")
    cfg = model.cfg
    if p.get("manipulations") is None:
        p["manipulations"] = (
            m["preset_values"]["manipulations"] if m["preset"] == "flux"
            else [x.label for x in default_battery(cfg.grid_h)]
        )
    manips = [Manipulation.parse(s) for s in p["manipulations"]]
    p["manipulations"] = [x.label for x in manips]
    p["seeds"] = [int(s) for s in (p.get("seeds") if p.get("seeds") is not None else [0, 1])]
    p["steps"] = int(p.get("steps") or cfg.steps_T)
    spec = ProbeSpec(prompts, p["seeds"], manips, p.get("layers"), p["steps"])
    p["layers"] = spec.validate(cfg.n_layers)
    log.info("probing %d prompts x %d seeds x %d layers x %d manipulations",
             len(prompts), len(spec.seeds), len(p["layers"]), len(manips))
    report = run_probe(model, spec, jobs=jobs)
    _write_text(out / "probe_rows.csv", report.rows_csv())
    _write_text(out / "probe_aggregate.csv", report.aggregate_csv())
    _write_text(out / "probe_scatter.csv", report.scatter_csv())
    return {"rows": len(report.rows)}


def cmd_classify(m: dict, model, out: Path, jobs: int = 1):
    p = m["params"]
    path = _existing(_require(p, "aggregate"), "aggregate CSV")
    with open(path, encoding="utf-8") as f:
        means = read_aggregate_csv(f.read())
    for key in ("p_frac", "c_frac"):
        p[key] = float(p[key] if p.get(key) is not None else m["preset_values"][key])
    sets = classify_layers(means, p["p_frac"], p["c_frac"])
    _write_json(out / "layer_sets.json", sets.to_dict())
    return sets.to_dict()


def _load_layer_sets(p: dict, n_layers: int):
    P, C = p.get("P"), p.get("C")
    if p.get("layer_sets"):
        sets = LayerSets.from_dict(_read_json(_existing(p["layer_sets"], "layer-sets file")))
        P = list(sets.P) if P is None else P
        C = list(sets.C) if C is None else C
    for name, s in (("P", P), ("C", C)):
        if s is not None and any(not 0 <= int(i) < n_layers for i in s):
            raise UsageError(f"layer set {name} references layers outside [0, {n_layers})")
    return P, C


def cmd_edit(m: dict, model, out: Path, jobs: int = 1):
    p = m["params"]
    task = _require(p, "task")
    if task not in TASKS:
        raise UsageError(f"unknown task {task!r}; choose from {TASKS}")
    cfg = model.cfg
    T = p["steps"] = int(p.get("steps") or cfg.steps_T)
    ps = mmdit.encode_prompt(_require(p, "prompt_src"), cfg)
    pe = mmdit.encode_prompt(_require(p, "prompt_edit"), cfg)
    p["threshold"] = float(p["threshold"] if p.get("threshold") is not None else DEFAULT_THRESHOLD)
    p["connectivity"] = int(p.get("connectivity") or 4)
    seed = m["seed"]
    P, C = _load_layer_sets(p, cfg.n_layers)
    written = {}

    if task == "object_addition":
        if P is None:
            raise UsageError("object_addition needs layer sets (layer_sets file or P list)")
        p["P"] = sorted(int(i) for i in P)
        p["R"] = int(p["R"]) if p.get("R") is not None else E.scaled_R(T)
        tok = _require(p, "object_token")
        res = E.edit_object_addition(model, ps, pe, tok, seed, p["P"], R=p["R"],
                                     threshold=p["threshold"], connectivity=p["connectivity"], steps=T)
        preserved = ~res.mask
    elif task == "non_rigid":
        if C is None:
            raise UsageError("non_rigid needs layer sets (layer_sets file or C list)")
        p["C"] = sorted(int(i) for i in C)
        res = E.edit_non_rigid(model, ps, pe, seed, p["C"], steps=T)
        preserved = None
    elif task == "background":
        p["B"] = int(p["B"]) if p.get("B") is not None else E.scaled_B(T)
        p["R"] = int(p["R"]) if p.get("R") is not None else E.scaled_R(T)
        p["n_points"] = int(p.get("n_points") or 5)
        res = E.edit_background(model, ps, pe, seed, _require(p, "fg_token"), IdentityRefiner(),
                                B=p["B"], R=p["R"], n_points=p["n_points"], threshold=p["threshold"],
                                connectivity=p["connectivity"], steps=T)
        preserved = res.mask
    elif task == "move":
        p["B"] = int(p["B"]) if p.get("B") is not None else E.scaled_B(T)
        offset = tuple(int(v) for v in _require(p, "offset"))
        if p.get("object_mask"):
            obj = formats.read_pbm(_existing(p["object_mask"], "object mask"))
        else:
            p["R"] = int(p["R"]) if p.get("R") is not None else E.scaled_R(T)
            obj, _ = E.reason_source_mask(model, ps, _require(p, "move_token"), seed, R=p["R"],
                                          threshold=p["threshold"], connectivity=p["connectivity"], steps=T)
        res = E.edit_move(model, ps, pe, seed, E.Move(offset, obj), B=p["B"], steps=T)
        moved = np.zeros_like(obj)
        src_idx, dst_idx = E._move_targets(E.Move(offset, obj))
        moved.ravel()[dst_idx] = True
        preserved = ~(obj | moved)
        formats.write_pbm(out / "mask_moved.pbm", moved, "moved object")
    else:
        p["B"] = int(p["B"]) if p.get("B") is not None else E.scaled_B(T)
        paste = E.Paste(tuple(int(v) for v in _require(p, "paste_offset")),
                        tuple(int(v) for v in _require(p, "src_size")))
        res = E.edit_outpaint(model, ps, pe, seed, paste, B=p["B"], steps=T)
        preserved = None

    formats.write_ppm(out / "x_src.ppm", res.x_src)
    formats.write_ppm(out / "x_edit.ppm", res.x_edit)
    formats.write_latent(out / "z0_src.bin", res.run.src_traj[-1])
    formats.write_latent(out / "z0_edit.bin", res.run.edit_traj[-1])
    if res.mask is not None:
        formats.write_pbm(out / "mask.pbm", res.mask, task)
        written["mask_cells"] = int(res.mask.sum())

    meta = {"task": task, "src_checksum": checksum(res.run.src_traj[-1]),
            "edit_checksum": checksum(res.run.edit_traj[-1])}
    if res.x_src.shape == res.x_edit.shape:
        meta["psnr_full_db"] = psnr(res.x_src, res.x_edit)
    if task == "outpaint":
        (r0, c0), (h, w) = paste.offset, paste.src_size
        meta["psnr_preserved_db"] = psnr(res.x_src, res.x_edit[r0:r0 + h, c0:c0 + w])
    elif preserved is not None:
        meta["psnr_preserved_db"] = psnr(res.x_src, res.x_edit, preserved) if preserved.any() else None
    meta.update({k: v for k, v in res.info.items() if k not in ("points",)})
    if "points" in res.info:
        meta["points"] = [list(pt) for pt in res.info["points"]]
    meta.update(written)
    _write_json(out / "metadata.json", meta)
    return meta


def cmd_invert(m: dict, model, out: Path, jobs: int = 1):
    p = m["params"]
    cfg = model.cfg
    prompt = mmdit.encode_prompt(_require(p, "prompt"), cfg)
    T = p["steps"] = int(p.get("steps") or cfg.steps_T)
    reference = None
    if p.get("latent"):
        z0 = formats.read_latent(_existing(p["latent"], "latent file"))
        if z0.shape[2] != cfg.channels:
            raise UsageError(f"latent has {z0.shape[2]} channels, model expects {cfg.channels}")
        if p.get("reference_noise"):
            reference = formats.read_latent(_existing(p["reference_noise"], "reference noise"))
            if reference.shape != z0.shape:
                raise UsageError(f"reference noise shape {reference.shape} differs from latent {z0.shape}")
        p["latent"] = str(p["latent"])
    else:
        p["latent"] = None
        traj = mmdit.euler_sample(model, prompt, m["seed"], T)
        z0, reference = traj[-1], traj[0]
    z_rec = mmdit.euler_invert(model, z0, prompt, T)
    formats.write_latent(out / "recovered_noise.bin", z_rec)
    meta = {"steps": T, "shape": list(z_rec.shape)}
    if reference is not None:
        err = np.linalg.norm((z_rec - reference).astype(np.float64)) / np.linalg.norm(reference.astype(np.float64))
        meta["relative_error"] = float(err)
    _write_json(out / "metadata.json", meta)
    return meta


def _read_rows_csv(path) -> ProbeReport:
    rows = []
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["layer", "manipulation", "prompt_idx", "seed", "psnr_db"]:
            raise UsageError(f"{path}: line 1: unexpected header {header}")
        for no, r in enumerate(reader, start=2):
            try:
                rows.append(ProbeRow(int(r[0]), r[1], int(r[2]), int(r[3]), float(r[4])))
            except (ValueError, IndexError):
                raise UsageError(f"{path}: line {no}: malformed row") from None
    return ProbeReport(rows)


def cmd_report(m: dict, model, out: Path, jobs: int = 1):
    from . import plotting

    p = m["params"]
    per_manip = None
    if p.get("rows"):
        report = _read_rows_csv(_existing(p["rows"], "probe rows CSV"))
        means = report.mean_by_layer()
        per_manip = report.mean_by_layer_manipulation()
    elif p.get("aggregate"):
        with open(_existing(p["aggregate"], "aggregate CSV"), encoding="utf-8") as f:
            means = read_aggregate_csv(f.read())
    else:
        means = None
    if means is None and not p.get("edit_dir"):
        raise UsageError("report needs 'rows', 'aggregate' or 'edit_dir'")
    outputs = []
    if means is not None:
        sets = None
        if p.get("layer_sets"):
            sets = LayerSets.from_dict(_read_json(_existing(p["layer_sets"], "layer-sets file")))
        ranked = sorted(means, key=lambda layer: (means[layer], layer))
        lines = ["layer,mean_psnr_db,rank,set"]
        for layer in sorted(means):
            tag = "P" if sets and layer in sets.P else "C" if sets and layer in sets.C else ""
            lines.append(f"{layer},{means[layer]:.6f},{ranked.index(layer)},{tag}")
        _write_text(out / "report_layers.csv", "\n".join(lines) + "\n")
        plotting.layer_dependency(means, out / "layer_dependency.png", per_manip, sets,
                                  title="positional dependency per layer")
        outputs += ["report_layers.csv", "layer_dependency.png"]
    if p.get("edit_dir"):
        d = Path(p["edit_dir"])
        x_src = formats.read_ppm(_existing(d / "x_src.ppm", "x_src.ppm"))
        x_edit = formats.read_ppm(_existing(d / "x_edit.ppm", "x_edit.ppm"))
        mask = formats.read_pbm(d / "mask.pbm") if (d / "mask.pbm").is_file() else None
        plotting.edit_panel(x_src, x_edit, out / "edit_panel.png", mask)
        outputs.append("edit_panel.png")
    return {"outputs": outputs}


COMMANDS = {
    "probe": cmd_probe,
    "classify": cmd_classify,
    "edit": cmd_edit,
    "invert": cmd_invert,
    "report": cmd_report,
}


def execute(manifest: dict, out, jobs: int = 1) -> dict:
    """Resolve ``manifest``, run it into ``out`` and write ``run.json``."""
    command = manifest.get("command")
    if command not in COMMANDS:
        raise UsageError(f"unknown command {command!r}")
    resolved, model = resolve_common(manifest)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    result = COMMANDS[command](resolved, model, out, jobs)
    resolved["params"] = {k: v for k, v in sorted(resolved["params"].items())}
    resolved.pop("out", None)
    resolved.pop("jobs", None)
    _write_json(out / "run.json", resolved)
    return result


# ------------------------------------------------------------------ argparse


def _int_list(text):
    return [int(v) for v in text.replace(" ", "").split(",") if v]


def _str_list(text):
    # manipulations contain commas inside parentheses: split on ';'
    return [v.strip() for v in text.split(";") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", help="JSON manifest; overrides every other flag except --out/--jobs")
    common.add_argument("--config", help="model config JSON")
    common.add_argument("--weights", help="weights file (default: seeded init)")
    common.add_argument("--model-seed", type=int, dest="model_seed")
    common.add_argument("--preset", choices=sorted(PRESETS))
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ropedit", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("probe", parents=[common], help="layer-wise RoPE probing sweep")
    sp.add_argument("--prompts", help="prompt corpus, one prompt per line")
    sp.add_argument("--seeds", type=_int_list)
    sp.add_argument("--manipulations", type=_str_list, help="';'-separated, e.g. 'remove;shift(0,20)'")
    sp.add_argument("--layers", type=_int_list)
    sp.add_argument("--steps", type=int)

    sp = sub.add_parser("classify", parents=[common], help="layer sets from an aggregate CSV")
    sp.add_argument("--aggregate")
    sp.add_argument("--p-frac", type=float, dest="p_frac")
    sp.add_argument("--c-frac", type=float, dest="c_frac")

    sp = sub.add_parser("edit", parents=[common], help="run one editing task")
    sp.add_argument("--task", choices=TASKS)
    sp.add_argument("--prompt-src", dest="prompt_src")
    sp.add_argument("--prompt-edit", dest="prompt_edit")
    sp.add_argument("--layer-sets", dest="layer_sets")
    sp.add_argument("--P", type=_int_list)
    sp.add_argument("--C", type=_int_list)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--R", type=int)
    sp.add_argument("--B", type=int)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--connectivity", type=int, choices=(4, 8))
    sp.add_argument("--object-token", dest="object_token")
    sp.add_argument("--fg-token", dest="fg_token")
    sp.add_argument("--n-points", type=int, dest="n_points")
    sp.add_argument("--offset", type=_int_list)
    sp.add_argument("--object-mask", dest="object_mask")
    sp.add_argument("--move-token", dest="move_token")
    sp.add_argument("--paste-offset", type=_int_list, dest="paste_offset")
    sp.add_argument("--src-size", type=_int_list, dest="src_size")

    sp = sub.add_parser("invert", parents=[common], help="inverse-Euler inversion of a latent")
    sp.add_argument("--prompt")
    sp.add_argument("--latent")
    sp.add_argument("--reference-noise", dest="reference_noise")
    sp.add_argument("--steps", type=int)

    sp = sub.add_parser("report", parents=[common], help="render probe/edit figures")
    sp.add_argument("--aggregate")
    sp.add_argument("--rows")
    sp.add_argument("--layer-sets", dest="layer_sets")
    sp.add_argument("--edit-dir", dest="edit_dir")
    return parser


_COMMON_KEYS = ("config", "weights", "model_seed", "preset", "seed")
_RUNTIME_KEYS = ("manifest", "out", "jobs", "verbose", "command")


def manifest_from_args(args) -> dict:
    ns = vars(args)
    if args.manifest:
        m = _read_json(args.manifest)
        if not isinstance(m, dict):
            raise UsageError("manifest must be a JSON object")
        m.setdefault("command", args.command)
        if m["command"] != args.command:
            raise UsageError(f"manifest is for '{m['command']}', not '{args.command}'")
        return m
    params = _prune({k: v for k, v in ns.items() if k not in _COMMON_KEYS + _RUNTIME_KEYS})
    m = _prune({k: ns.get(k) for k in _COMMON_KEYS})
    m["command"] = args.command
    m["params"] = params
    return m


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        manifest = manifest_from_args(args)
        result = execute(manifest, args.out, max(1, args.jobs))
    except ReasoningError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except (RopeditError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    log.info("done: %s", result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
