"""``lidarvq`` command line: data generation, training, generation, evaluation and rendering.

Exit codes: 0 success, 1 usage error, 2 data or model error.
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import formats
from . import generator as gen
from . import metrics
from . import scenes
from . import vqvae
from .config import ConfigError, load_config
from .voxel import GridError, OccupancyGrid, voxelize

log = logging.getLogger("lidarvq")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- file helpers -------------------------------------------------------------

def _listdir(path, suffix):
    if not os.path.isdir(path):
        raise DataError(f"{path}: not a directory")
    names = sorted(n for n in os.listdir(path) if n.endswith(suffix))
    return [os.path.join(path, n) for n in names]


def _read_manifest(data_dir):
    path = os.path.join(data_dir, "manifest.txt")
    if not os.path.exists(path):
        raise DataError(f"{data_dir}: no manifest.txt")
    rows = []
    with open(path) as f:
        for line in f:
            if line.startswith("#") or not line.strip():
                continue
            index, seed, sparse, dense = line.split()
            rows.append((int(index), int(seed), os.path.join(data_dir, sparse), os.path.join(data_dir, dense)))
    if not rows:
        raise DataError(f"{path}: empty manifest")
    return rows


def _load_grids(path, grid_cfg):
    """Grids from a .ulog/.ulpc file or directory; directories prefer a gen-data manifest (dense side)."""
    if os.path.isdir(path):
        if os.path.exists(os.path.join(path, "manifest.txt")):
            files = [row[3] for row in _read_manifest(path)]
        else:
            files = _listdir(path, ".ulog") or _listdir(path, ".ulpc")
        if not files:
            raise DataError(f"{path}: no .ulog or .ulpc files")
    else:
        files = [path]
    grids, clouds = [], []
    for f in files:
        if f.endswith(".ulog"):
            bits = formats.read_ulog(f)
            if bits.shape != grid_cfg.shape:
                raise DataError(f"{f}: grid {bits.shape} does not match configured {grid_cfg.shape}")
            grids.append(OccupancyGrid(grid_cfg, bits))
            clouds.append(None)
        else:
            cloud = formats.read_ulpc(f)
            grids.append(voxelize(cloud, grid_cfg))
            clouds.append(cloud)
    return grids, clouds


def _out_dir(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _load_vqvae(path):
    return vqvae.from_entries(formats.read_ulck(path))


def _load_generator(path):
    entries = formats.read_ulck(path)
    model = gen.from_entries(entries)
    blanks = None
    if "meta.blank" in entries:
        counts = np.asarray(entries["meta.blank_counts"]).astype(np.int64)
        blanks = gen.BlankSet(np.asarray(entries["meta.blank"]).astype(np.int64), counts)
    return model, blanks


def _write_codemap_and_grid(out, stem, codemap, vq):
    formats.write_ulcm(os.path.join(out, stem + ".ulcm"), codemap)
    logits = vqvae.decode(np.asarray(codemap, dtype=np.int64), vq)
    formats.write_ulog(os.path.join(out, stem + ".ulog"), vqvae.binarize(logits))


def _parse_ints(text, n, flag):
    try:
        vals = [int(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"{flag}: expected {n} comma-separated integers") from None
    if len(vals) != n:
        raise UsageError(f"{flag}: expected {n} comma-separated integers")
    return vals


def read_mask(path, shape):
    """Text mask: one row per line, '1' marks a conditioned (kept) cell, '0' a cell to generate."""
    with open(path) as f:
        rows = [line.strip() for line in f if line.strip()]
    if len(rows) != shape[0] or any(len(r) != shape[1] or set(r) - {"0", "1"} for r in rows):
        raise DataError(f"{path}: mask must be {shape[0]} lines of {shape[1]} '0'/'1' characters")
    return np.array([[c == "1" for c in r] for r in rows])


def write_pgm(path, grid):
    """8-bit binary PGM, pixel (i, j) = 255 * occupied count of column (i, j) / C."""
    bits = grid.bits
    h, w, c = bits.shape
    counts = bits.sum(axis=2, dtype=np.int64)
    pixels = (255 * counts // c).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


# -- subcommands --------------------------------------------------------------

def cmd_gen_data(args, cfg):
    out = _out_dir(args)
    count = cfg.n_scenes if args.count is None else args.count
    scene_cfg, beams = cfg.scene(), cfg.beams()
    lines = ["# index seed sparse dense\n"]
    for i in range(count):
        seed = scenes.derive_seed(args.seed, i)
        pair = scenes.make_pair(scenes.random_scene(seed, scene_cfg), beams, cfg.densify_factor)
        sparse, dense = f"{i:05d}_sparse.ulpc", f"{i:05d}_dense.ulpc"
        formats.write_ulpc(os.path.join(out, sparse), pair.sparse)
        formats.write_ulpc(os.path.join(out, dense), pair.dense)
        lines.append(f"{i} {seed} {sparse} {dense}\n")
    with open(os.path.join(out, "manifest.txt"), "w") as f:
        f.writelines(lines)
    return 0


def cmd_train_vqvae(args, cfg):
    grid_cfg = cfg.grid()
    rows = _read_manifest(args.data)
    sparse = np.stack([voxelize(formats.read_ulpc(r[2]), grid_cfg).bits for r in rows])
    dense = np.stack([voxelize(formats.read_ulpc(r[3]), grid_cfg).bits for r in rows])
    model = vqvae.train((sparse, dense), cfg.vq_train(args.seed), cfg.vq_model())
    out = _out_dir(args)
    formats.write_ulck(os.path.join(out, "vqvae.ulck"), vqvae.to_entries(model))
    with open(os.path.join(out, "vqvae_log.txt"), "w") as f:
        f.write(f"final_utilization={vqvae.final_utilization(model)!r}\n")
        f.write(f"reinit_events={model.history.reinit_events}\n")
        for i, (loss, bce) in enumerate(zip(model.history.loss, model.history.bce)):
            f.write(f"{i} {loss!r} {bce!r}\n")
    return 0


def cmd_encode_corpus(args, cfg):
    vq = _load_vqvae(args.model)
    grids, _ = _load_grids(args.data, vq.cfg.grid)
    out = _out_dir(args)
    for i, g in enumerate(grids):
        rec = vqvae.reconstruct(g, args.encoder, vq)
        formats.write_ulcm(os.path.join(out, f"{i:05d}.ulcm"), rec.codemap)
    return 0


def cmd_train_gen(args, cfg):
    files = _listdir(args.codes, ".ulcm")
    if not files:
        raise DataError(f"{args.codes}: no .ulcm code maps")
    maps = np.stack([formats.read_ulcm(f) for f in files])
    mcfg = cfg.gen_model()
    if maps.shape[1:] != (mcfg.h, mcfg.w):
        raise DataError(f"code maps are {maps.shape[1:]}, configured grid gives {(mcfg.h, mcfg.w)}")
    blanks = gen.identify_blank(maps, cfg.blank_coverage, cfg.n_codes)
    model = gen.train_masked(maps, cfg.gen_train(args.seed), mcfg)
    entries = gen.to_entries(model)
    entries["meta.blank"] = blanks.codes.astype(np.float32)
    entries["meta.blank_counts"] = blanks.counts.astype(np.float32)
    out = _out_dir(args)
    formats.write_ulck(os.path.join(out, "generator.ulck"), entries)
    with open(os.path.join(out, "generator_log.txt"), "w") as f:
        f.write("blank=" + ",".join(str(c) for c in blanks.codes) + "\n")
        for i, loss in enumerate(model.history.loss):
            f.write(f"{i} {loss!r}\n")
    return 0


def cmd_reconstruct(args, cfg):
    vq = _load_vqvae(args.model)
    grids, _ = _load_grids(args.input, vq.cfg.grid)
    out = _out_dir(args)
    for i, g in enumerate(grids):
        rec = vqvae.reconstruct(g, args.encoder, vq)
        formats.write_ulcm(os.path.join(out, f"{i:05d}.ulcm"), rec.codemap)
        formats.write_ulog(os.path.join(out, f"{i:05d}.ulog"), vqvae.binarize(rec.logits))
    return 0


def cmd_complete(args, cfg):
    vq = _load_vqvae(args.model)
    if os.path.isdir(args.input) and os.path.exists(os.path.join(args.input, "manifest.txt")):
        files = [r[2] for r in _read_manifest(args.input)]
        grids = [voxelize(formats.read_ulpc(f), vq.cfg.grid) for f in files]
    else:
        grids, _ = _load_grids(args.input, vq.cfg.grid)
    out = _out_dir(args)
    for i, g in enumerate(grids):
        formats.write_ulog(os.path.join(out, f"{i:05d}.ulog"), vqvae.complete(g, vq).bits)
    return 0


def cmd_generate(args, cfg):
    vq = _load_vqvae(args.vqvae)
    model, blanks = _load_generator(args.generator)
    condition = None
    if args.condition is not None:
        cm = formats.read_ulcm(args.condition)
        if cm.shape != (model.cfg.h, model.cfg.w):
            raise DataError(f"{args.condition}: code map {cm.shape} does not match generator")
        keep = np.ones(cm.shape, dtype=bool) if args.mask is None else read_mask(args.mask, cm.shape)
        condition = np.where(keep, cm, model.cfg.mask_id)
    elif args.mask is not None:
        raise UsageError("--mask needs --condition")
    out = _out_dir(args)
    for i in range(args.count):
        sample_cfg = cfg.sampling(scenes.derive_seed(args.seed, i))
        codemap = gen.sample(model, sample_cfg, blanks, condition)
        _write_codemap_and_grid(out, f"{i:05d}", codemap, vq)
    return 0


def cmd_denoise(args, cfg):
    vq = _load_vqvae(args.vqvae)
    model, blanks = _load_generator(args.generator)
    files = _listdir(args.input, ".ulcm") if os.path.isdir(args.input) else [args.input]
    out = _out_dir(args)
    for i, f in enumerate(files):
        sample_cfg = cfg.sampling(scenes.derive_seed(args.seed, i))
        rounds = cfg.denoise_rounds if args.rounds is None else args.rounds
        codemap = gen.denoise(formats.read_ulcm(f), model, rounds, cfg.denoise_fraction, sample_cfg, blanks)
        _write_codemap_and_grid(out, os.path.splitext(os.path.basename(f))[0], codemap, vq)
    return 0


def cmd_manipulate(args, cfg):
    rect = _parse_ints(args.src_rect, 4, "--src-rect")
    origin = _parse_ints(args.dst_origin, 2, "--dst-origin")
    vq = _load_vqvae(args.vqvae)
    dst = formats.read_ulcm(args.dst)
    src = formats.read_ulcm(args.src) if args.src else dst
    codemap = gen.paste_region(dst, src, rect, origin)
    _write_codemap_and_grid(_out_dir(args), "manipulated", codemap, vq)
    return 0


def cmd_eval(args, cfg):
    grid_cfg = cfg.grid()
    real, clouds = _load_grids(args.real, grid_cfg)
    fake, _ = _load_grids(args.gen, grid_cfg)
    points = clouds if args.mode == "duplicated" and all(c is not None for c in clouds) else None
    bandwidth = cfg.bandwidth if cfg.bandwidth == "auto" else float(cfg.bandwidth)
    report = metrics.evaluate_sets(real, fake, args.mode, real_points=points, bandwidth=bandwidth)
    sys.stdout.write(report.text())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, f"eval_{args.mode}.txt"), "w") as f:
            f.write(report.text())
    return 0


def cmd_render(args, cfg):
    grids, _ = _load_grids(args.input, cfg.grid())
    if len(grids) == 1 and not os.path.isdir(args.input) and args.out.endswith(".pgm"):
        write_pgm(args.out, grids[0])
        return 0
    out = _out_dir(args)
    for i, g in enumerate(grids):
        write_pgm(os.path.join(out, f"{i:05d}.pgm"), g)
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=".")
    common.add_argument("--config", default=None)
    p = _Parser(prog="lidarvq", description="Discrete LiDAR scene modeling toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_text):
        sp = sub.add_parser(name, parents=[common], help=help_text)
        sp.set_defaults(func=func)
        return sp

    sp = add("gen-data", cmd_gen_data, "procedural paired sparse/dense scans")
    sp.add_argument("--count", type=int, default=None)
    sp = add("train-vqvae", cmd_train_vqvae, "train the VQ-VAE on a gen-data directory")
    sp.add_argument("--data", required=True)
    sp = add("encode-corpus", cmd_encode_corpus, "grids to code maps")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--encoder", choices=vqvae.ENCODERS, default="dense")
    sp = add("train-gen", cmd_train_gen, "train the masked code-map prior")
    sp.add_argument("--codes", required=True)
    sp = add("reconstruct", cmd_reconstruct, "encode, quantize and decode grids")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--encoder", choices=vqvae.ENCODERS, default="dense")
    sp = add("complete", cmd_complete, "densify sparse scans")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True)
    sp = add("generate", cmd_generate, "sample code maps and decode them")
    sp.add_argument("--vqvae", required=True)
    sp.add_argument("--generator", required=True)
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--condition", default=None)
    sp.add_argument("--mask", default=None)
    sp = add("denoise", cmd_denoise, "re-generate random regions of code maps")
    sp.add_argument("--vqvae", required=True)
    sp.add_argument("--generator", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--rounds", type=int, default=None)
    sp = add("manipulate", cmd_manipulate, "paste a code-map region")
    sp.add_argument("--vqvae", required=True)
    sp.add_argument("--dst", required=True)
    sp.add_argument("--src", default=None)
    sp.add_argument("--src-rect", required=True, help="r0,c0,rows,cols")
    sp.add_argument("--dst-origin", required=True, help="r,c")
    sp = add("eval", cmd_eval, "MMD and JSD between real and generated sets")
    sp.add_argument("--real", required=True)
    sp.add_argument("--gen", required=True)
    sp.add_argument("--mode", choices=metrics.MODES, default="occupancy")
    sp.set_defaults(out=None)
    sp = add("render", cmd_render, "grids to PGM images")
    sp.add_argument("--input", required=True)
    return p


def run(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "func", None) is None:
            raise UsageError("missing subcommand")
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"lidarvq: usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, GridError, formats.FormatError, gen.GeneratorError,
            scenes.SceneError, vqvae.TrainingDiverged, OSError, ValueError, KeyError) as exc:
        print(f"lidarvq: error: {exc}", file=sys.stderr)
        return 2


def main():
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    sys.exit(run())


if __name__ == "__main__":
    main()
