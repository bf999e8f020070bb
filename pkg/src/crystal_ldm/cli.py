"""Command-line entry point: gen-data, train-ae, train-diff, sample, eval.

Exit codes: 0 ok, 1 user error, 2 internal error. Every failure prints a
single ``error: <reason>`` line on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .autoencoder import Autoencoder, train_autoencoder
from .canon import CanonError
from .config import ConfigError, RunConfig, parse_config, parse_overrides
from .diffusion import (ConditioningSpec, DiffusionModel, count_histogram, prepare_structure,
                        sample_atom_count, sample_structures, train_diffusion)
from .evaluate import (id_components, rediscovery, report_line, structure_id, summary_document,
                       validity_check, vnu)
from .io import (CheckpointError, CifParseError, Checkpoint, load_checkpoint, read_cif,
                 read_manifest, save_checkpoint, split_entries, toy_dataset, write_cif,
                 write_manifest)
from .training import TrainingError, config_from_array

log = logging.getLogger("crystal_ldm")

AE_CKPT = "ae.ckpt"
DIFF_CKPT = "diff.ckpt"
METRICS = "metrics.txt"
COND_MODES = ("inpaint", "composition", "bonds", "cluster")


class UserError(Exception):
    """Bad input from the caller; reported with exit code 1."""


# -- helpers ----------------------------------------------------------------
def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _resolve_config(args, inherited: RunConfig | None = None) -> RunConfig:
    """Config precedence: --config file, else the inherited one, else defaults; then --set; then --seed."""
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise UserError(f"config file not found: {path}")
        cfg = parse_config(path.read_text())
    else:
        cfg = inherited or RunConfig()
    pairs = {}
    for item in args.set or []:
        if "=" not in item:
            raise UserError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v
    cfg = parse_overrides(pairs, cfg)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _prepare_out(out: Path, force: bool, produced: list[str]) -> None:
    """Create ``out``; refuse to reuse a directory holding any of ``produced`` unless forced."""
    if out.exists() and not out.is_dir():
        raise UserError(f"output path exists and is not a directory: {out}")
    clash = [p for p in produced if (out / p).exists()]
    if clash and not force:
        raise UserError(f"output directory {out} already holds {clash[0]} (use --force)")
    out.mkdir(parents=True, exist_ok=True)


def _load_ckpt(path: str | None, what: str) -> Checkpoint:
    if path is None:
        raise UserError(f"missing {what} checkpoint (pass --{what})")
    p = Path(path)
    if not p.is_file():
        raise UserError(f"{what} checkpoint not found: {p}")
    try:
        return load_checkpoint(p)
    except CheckpointError as e:
        raise UserError(f"{what} checkpoint {p} is unreadable: {e}") from e


def _ckpt_config(ck: Checkpoint, what: str) -> RunConfig:
    if "config" not in ck.extra:
        raise UserError(f"{what} checkpoint carries no config")
    return config_from_array(ck.extra["config"])


def _training_structures(data: Path, split: str = "train"):
    manifest_path = data / "manifest.tsv" if data.is_dir() else data
    if not manifest_path.is_file():
        raise UserError(f"manifest not found: {manifest_path}")
    manifest = read_manifest(manifest_path)
    paths = manifest.paths(split)
    if not paths:
        raise UserError(f"manifest {manifest_path} lists no {split} structures")
    out = []
    for p in paths:
        try:
            out.append(read_cif(p))
        except (OSError, CifParseError) as e:
            raise UserError(f"cannot read training structure {p}: {e}") from e
    return out


def _fmt_metric(v) -> str:
    return f"{v:.10g}" if isinstance(v, float) else str(v)


class _MetricsWriter:
    def __init__(self, path: Path, append: bool):
        self.fh = path.open("a" if append else "w")

    def __call__(self, step: int, terms: dict) -> None:
        line = " ".join([f"step={step}"] + [f"{k}={_fmt_metric(v)}" for k, v in terms.items()])
        self.fh.write(line + "\n")
        self.fh.flush()
        log.info(line)

    def close(self):
        self.fh.close()


# -- subcommands ------------------------------------------------------------
def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    _prepare_out(out, args.force, ["manifest.tsv", "structures"])
    sdir = out / "structures"
    sdir.mkdir(exist_ok=True)
    for old in sdir.glob("*.cif"):
        old.unlink()
    structures = toy_dataset(cfg.seed, cfg.n_structures, (cfg.min_atoms, cfg.max_atoms))
    rel = []
    for k, s in enumerate(structures):
        name = f"s{k:05d}"
        (sdir / f"{name}.cif").write_text(write_cif(s, name))
        rel.append(f"structures/{name}.cif")
    test_frac = 1.0 - cfg.train_frac - cfg.val_frac
    if test_frac < -1e-12:
        raise UserError("train_frac + val_frac must not exceed 1")
    manifest = split_entries(rel, cfg.seed, (cfg.train_frac, cfg.val_frac, max(test_frac, 0.0)))
    write_manifest(out / "manifest.tsv", manifest)
    (out / "config.txt").write_text(cfg.to_text())
    counts = {t: sum(1 for _, tag in manifest.entries if tag == t) for t in ("train", "val", "test")}
    print(f"wrote {len(structures)} structures to {sdir} "
          f"(train={counts['train']} val={counts['val']} test={counts['test']})")
    return 0


def cmd_train_ae(args) -> int:
    data = Path(args.data)
    resume = _load_ckpt(args.resume, "resume") if args.resume else None
    inherited = None
    if resume is not None:
        inherited = _ckpt_config(resume, "resume")
    elif (data / "config.txt").is_file():
        inherited = parse_config((data / "config.txt").read_text())
    cfg = _resolve_config(args, inherited)
    if resume is not None and resume.fingerprint != cfg.fingerprint():
        raise UserError("resume checkpoint was written under different network shapes")
    structures = _training_structures(data)
    out = Path(args.out)
    _prepare_out(out, args.force or resume is not None, [AE_CKPT, METRICS])
    metrics = _MetricsWriter(out / METRICS, append=resume is not None)
    try:
        _, ck = train_autoencoder(structures, cfg, metrics, resume=resume)
    finally:
        metrics.close()
    save_checkpoint(out / AE_CKPT, ck)
    (out / "config.txt").write_text(cfg.to_text())
    print(f"autoencoder checkpoint at step {ck.step}: {out / AE_CKPT}")
    return 0


def cmd_train_diff(args) -> int:
    ae_path = Path(args.ae) if args.ae else None
    ae_ck = _load_ckpt(args.ae, "ae")
    resume = _load_ckpt(args.resume, "resume") if args.resume else None
    inherited = _ckpt_config(resume, "resume") if resume is not None else _ckpt_config(ae_ck, "ae")
    cfg = _resolve_config(args, inherited)
    if ae_ck.fingerprint != cfg.fingerprint():
        raise UserError("ae checkpoint was written under different network shapes than the config")
    ae = Autoencoder.from_checkpoint(ae_ck)
    digest = _file_digest(ae_path)
    if resume is not None:
        stored = resume.extra.get("ae_fingerprint", np.zeros(0, np.uint8)).tobytes().decode()
        if stored != digest:
            raise UserError("resume checkpoint was trained against a different ae checkpoint")
    structures = _training_structures(Path(args.data))
    out = Path(args.out)
    _prepare_out(out, args.force or resume is not None, [DIFF_CKPT, METRICS])
    metrics = _MetricsWriter(out / METRICS, append=resume is not None)
    try:
        _, ck = train_diffusion(structures, ae, cfg, metrics, ae_fingerprint=digest, resume=resume)
    finally:
        metrics.close()
    save_checkpoint(out / DIFF_CKPT, ck)
    (out / "config.txt").write_text(cfg.to_text())
    print(f"diffusion checkpoint at step {ck.step}: {out / DIFF_CKPT}")
    return 0


def _read_cond_file(path: Path):
    """``key = value`` lines: template (CIF path), mode (comma list), optional free_fragment."""
    if not path.is_file():
        raise UserError(f"conditioning file not found: {path}")
    keys = {}
    for k, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UserError(f"{path}:{k}: expected 'key = value'")
        key, val = (x.strip() for x in line.split("=", 1))
        if key not in ("template", "mode", "free_fragment"):
            raise UserError(f"{path}:{k}: unknown key {key!r}")
        keys[key] = val
    if "template" not in keys or "mode" not in keys:
        raise UserError(f"{path}: needs both 'template' and 'mode'")
    tpath = Path(keys["template"])
    if not tpath.is_absolute():
        tpath = path.parent / tpath
    try:
        template = prepare_structure(read_cif(tpath))
    except (OSError, CifParseError) as e:
        raise UserError(f"cannot read template {tpath}: {e}") from e
    modes = [m.strip() for m in keys["mode"].split(",") if m.strip()]
    bad = [m for m in modes if m not in COND_MODES]
    if bad or not modes:
        raise UserError(f"unknown conditioning mode {bad[0] if bad else keys['mode']!r}")
    n = template.structure.n_atoms
    flags = {m: m in modes for m in COND_MODES}
    free, mask = -1, np.zeros(n, dtype=bool)
    if flags["inpaint"]:
        if len(template.frags) < 2:
            raise UserError("inpainting needs a template with at least two fragments")
        free = int(keys.get("free_fragment", len(template.frags) - 1))
        if not 0 <= free < len(template.frags):
            raise UserError(f"free_fragment must lie in 0..{len(template.frags) - 1}")
        for k, f in enumerate(template.frags):
            if k != free:
                mask[f.atoms] = True
    # composition and bond constraints always carry cluster counts, as in training
    flags["cluster"] = flags["cluster"] or flags["composition"] or flags["bonds"]
    return template, ConditioningSpec(n, free_fragment=free, fixed_mask=mask, **flags)


def cmd_sample(args) -> int:
    ae_path = Path(args.ae) if args.ae else None
    ae_ck = _load_ckpt(args.ae, "ae")
    diff_ck = _load_ckpt(args.diff, "diff")
    stored = diff_ck.extra.get("ae_fingerprint", np.zeros(0, np.uint8)).tobytes().decode()
    if stored and stored != _file_digest(ae_path):
        raise UserError("diff checkpoint was trained against a different ae checkpoint")
    cfg = _resolve_config(args, _ckpt_config(diff_ck, "diff"))
    if args.count < 1:
        raise UserError("--count must be >= 1")
    ae = Autoencoder.from_checkpoint(ae_ck)
    model = DiffusionModel.from_checkpoint(diff_ck)
    n_steps = args.steps if args.steps is not None else cfg.sample_steps
    if n_steps < 1:
        raise UserError("--steps must be >= 1")

    template = spec = None
    if args.cond is not None:
        template, spec = _read_cond_file(Path(args.cond))
        counts = [template.structure.n_atoms] * args.count
    elif args.n_atoms is not None:
        try:
            given = [int(x) for x in args.n_atoms.split(",")]
        except ValueError as e:
            raise UserError(f"--n-atoms expects comma-separated integers: {args.n_atoms!r}") from e
        if len(given) not in (1, args.count) or min(given) < 1:
            raise UserError("--n-atoms needs one positive value or one per sample")
        counts = given * args.count if len(given) == 1 else given
    else:
        hist = count_histogram(model.atom_counts)
        rng_n = np.random.default_rng([cfg.seed, 5])
        counts = [sample_atom_count(rng_n, hist) for _ in range(args.count)]
    mode = spec.mode if spec is not None else "de-novo"

    out = Path(args.out)
    _prepare_out(out, args.force, ["index.tsv"])
    for old in out.glob("sample_*.cif"):
        old.unlink()
    rows = ["file\tid\tN\tseed\tmode"]
    batch = cfg.diff_batch
    for b0 in range(0, len(counts), batch):
        chunk = counts[b0:b0 + batch]
        rng = np.random.default_rng([cfg.seed, 4, b0 // batch])
        structs = sample_structures(model, ae, chunk, n_steps, rng, template, spec)
        for k, s in enumerate(structs, start=b0):
            name = f"sample_{k:05d}"
            (out / f"{name}.cif").write_text(write_cif(s, name))
            try:
                sid = structure_id(s, cfg.bond_factor)
            except CanonError:
                sid = "-"
            rows.append(f"{name}.cif\t{sid}\t{s.n_atoms}\t{cfg.seed}\t{mode}")
        log.info("sampled %d/%d", min(b0 + batch, len(counts)), len(counts))
    (out / "index.tsv").write_text("\n".join(rows) + "\n")
    print(f"wrote {len(counts)} samples to {out}")
    return 0


def _manifest_ids(path: Path, split: str | None, bond_factor: float) -> list[str]:
    if not path.is_file():
        raise UserError(f"manifest not found: {path}")
    ids = []
    for p in read_manifest(path).paths(split):
        try:
            ids.append(structure_id(read_cif(p), bond_factor))
        except (OSError, CifParseError, CanonError) as e:
            log.warning("skipping %s: %s", p, e)
    return ids


def evaluate_directory(samples: Path, train_ids, reference_ids=None, cfg: RunConfig | None = None):
    """Per-file report lines, the VNU report and (with references) rediscovery."""
    cfg = cfg or RunConfig()
    files = sorted(samples.glob("*.cif"))
    lines, ids, valid = [], [], []
    for f in files:
        try:
            s = read_cif(f)
            sid = structure_id(s, cfg.bond_factor)
            rep = validity_check(s, cfg.bond_factor, cfg.overlap_factor)
        except (OSError, CifParseError, CanonError) as e:
            log.warning("identifier failure for %s: %s", f.name, e)
            sid, rep = None, None
        ids.append(sid)
        valid.append(rep is not None and rep.overall_valid)
        lines.append(report_line(f.name, sid, rep))
    v = vnu(ids, train_ids, valid)
    red = None
    if reference_ids is not None:
        comps = [c for i in ids if i is not None for c in id_components(i)]
        train_c = [c for i in train_ids for c in id_components(i)]
        ref_c = [c for i in reference_ids for c in id_components(i)]
        red = rediscovery(comps, train_c, ref_c)
    return lines, v, red


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    samples = Path(args.samples)
    if not samples.is_dir():
        raise UserError(f"samples directory not found: {samples}")
    train_ids = _manifest_ids(Path(args.train), "train", cfg.bond_factor)
    ref_ids = _manifest_ids(Path(args.reference), None, cfg.bond_factor) if args.reference else None
    lines, v, red = evaluate_directory(samples, train_ids, ref_ids, cfg)
    out = Path(args.out)
    _prepare_out(out, args.force, ["reports.tsv", "summary.json"])
    (out / "reports.tsv").write_text("\n".join(["file\tid\tflags"] + lines) + "\n")
    (out / "summary.json").write_text(summary_document(v, red) + "\n")
    rates = v.rates()
    print(" ".join([f"total={v.total}"] + [f"{k}={rates[k]:.4f}" for k in rates]))
    if red is not None:
        print(f"rediscovered={red.formatted()}")
    return 0


# -- parser -----------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="crystal-ldm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a toy dataset and split manifest")
    g.set_defaults(func=cmd_gen_data)

    a = sub.add_parser("train-ae", parents=[common], help="train the autoencoder")
    a.add_argument("--data", required=True, help="dataset directory or manifest")
    a.add_argument("--resume", help="autoencoder checkpoint to continue from")
    a.set_defaults(func=cmd_train_ae)

    d = sub.add_parser("train-diff", parents=[common], help="train the latent diffusion model")
    d.add_argument("--data", required=True, help="dataset directory or manifest")
    d.add_argument("--ae", help="trained autoencoder checkpoint")
    d.add_argument("--resume", help="diffusion checkpoint to continue from")
    d.set_defaults(func=cmd_train_diff)

    s = sub.add_parser("sample", parents=[common], help="sample structures")
    s.add_argument("--ae", help="trained autoencoder checkpoint")
    s.add_argument("--diff", help="trained diffusion checkpoint")
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--steps", type=int, help="sampler steps (default: sample_steps)")
    s.add_argument("--n-atoms", help="atom count, or one per sample, comma separated")
    s.add_argument("--cond", help="conditioning file (template + mode)")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", parents=[common], help="score a directory of samples")
    e.add_argument("--samples", required=True, help="directory of sampled CIFs")
    e.add_argument("--train", required=True, help="training manifest")
    e.add_argument("--reference", help="reference manifest for rediscovery")
    e.set_defaults(func=cmd_eval)
    return p


def _one_line(msg: str) -> str:
    return " ".join(str(msg).split())


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse already printed usage; normalise its status to the user-error code
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UserError, ConfigError) as e:
        print(f"error: {_one_line(e)}", file=sys.stderr)
        return 1
    except TrainingError as e:
        print(f"error: training aborted: {_one_line(e)}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - last-resort guard keeps the single-line contract
        log.debug("internal error", exc_info=True)
        print(f"error: internal: {type(e).__name__}: {_one_line(e)}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
