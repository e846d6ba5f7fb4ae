"""Training orchestration: three stages, synthetic rounds, audit logs.

Stages 1 and 2 share one sampled-update loop (they differ only in which
datasets exist); stage 3 runs deterministic sweeps over a precomputed update
plan. Every random draw comes from a stream named after the stage and step
number, so a run can be stopped at any checkpoint and resumed bit-exactly.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .config import ExperimentConfig, config_digest, to_dict
from .corpus import (SamplingPolicy, bucket_batches, build_registry,
                     choose_dataset, draw_batch, load_manifest, read_lines,
                     save_manifest)
from .errors import ConfigError, DataError, NumericError
from .evaluation import evaluate_model, translate_corpus, write_report
from .model import ModelConfig, ModelParams, init_params
from .objectives import (back_translation_loss, cross_entropy_loss,
                         cross_translation_loss, mass_loss)
from .optim import LrSchedule, OptimState, lr_at, optimizer_step
from .rng import named_rng
from .synthlang import BenchmarkConfig, build_benchmark, load_testsets
from .tokenizer import save_vocab, train_bpe, vocab_digest

STAGE_TAGS = {"stage1": "1", "stage2a": "2a", "stage2b": "2b", "stage3": "3"}


@dataclass
class RunContext:
    """Everything the stage runners share: config, model geometry, vocab,
    where the data lives, and where artifacts go."""

    cfg: ExperimentConfig
    model_cfg: ModelConfig
    vocab: object
    manifest_path: str
    out_dir: str
    vocab_digest: str = ""
    config_digest: str = ""
    quiet: bool = False

    def say(self, msg: str) -> None:
        if not self.quiet:
            print(msg, flush=True)

    def registry(self, extra_entries=None):
        # the model's position table caps usable length below the corpus filter
        limit = min(self.cfg.max_pieces, self.model_cfg.max_positions - 2)
        return build_registry(self.manifest_path, self.vocab, limit,
                              extra_entries=extra_entries)

    def stage_spec(self, label: str):
        specs = {"stage1": self.cfg.stage1, "stage2a": self.cfg.stage2a,
                 "stage2b": self.cfg.stage2b}
        if label not in specs:
            raise ConfigError(f"unknown stage label {label!r}")
        return specs[label]


@dataclass
class ArmOptions:
    """Ablation switches. The default is the full method."""

    use_synthetic: bool = True
    drop_datasets: tuple = ()
    stage3_objectives: tuple | None = None  # None = all of bt/ct/ce


class AuditLog:
    """One tab-separated line per attempted update:
    step dataset objective src_lang tgt_lang loss
    Loss is %.10g, or the literal "skip" when every decode came back empty."""

    def __init__(self, path, append: bool = False):
        self.fh = open(path, "a" if append else "w", encoding="utf-8")

    def note(self, step, dataset, objective, src_lang, tgt_lang, loss):
        val = "skip" if loss is None else "%.10g" % loss
        self.fh.write(f"{step}\t{dataset}\t{objective}\t{src_lang}\t{tgt_lang}\t{val}\n")

    def close(self):
        self.fh.flush()
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _english_and_targets(languages):
    english = [l.name for l in languages if l.is_english]
    if len(english) != 1:
        raise DataError(f"expected exactly one English language, got {english}")
    targets = sorted(l.name for l in languages if l.is_target)
    return english[0], targets


def check_manifest_compat(cfg: ExperimentConfig, languages, entries) -> None:
    """Pivot table and manifest must agree: every pivot auxiliary has real
    parallel data with English, and no target appears in real parallel data."""
    english, targets = _english_and_targets(languages)
    names = {l.name for l in languages}
    real_parallel = [e for e in entries
                     if e["kind"] == "parallel" and not e.get("synthetic")]
    problems = []
    for tgt, pivots in sorted(cfg.pivots.items()):
        if tgt not in names:
            problems.append(f"pivot entry for unknown language {tgt!r}")
            continue
        if tgt not in targets:
            problems.append(f"pivot entry for {tgt!r}, which is not a target")
        for aux in pivots:
            if aux not in names:
                problems.append(f"pivot {aux!r} for {tgt!r} is not in the manifest")
            elif not any({e["src"], e["tgt"]} == {aux, english}
                         for e in real_parallel):
                problems.append(
                    f"pivot {aux!r} for {tgt!r} has no parallel data with {english!r}")
    for e in real_parallel:
        for side in (e["src"], e["tgt"]):
            if side in targets:
                problems.append(
                    f"target language {side!r} appears in real parallel dataset {e['id']}")
    if problems:
        raise ConfigError(problems)


# ---------------------------------------------------------------------------
# stages 1 and 2: the sampled-update loop


def run_algorithm1(ctx: RunContext, params: ModelParams, datasets, label: str,
                   spec, stage_tag: str, opt: OptimState | None = None,
                   start_step: int = 0) -> Checkpoint:
    """Sampled training loop: each step picks a dataset, draws a batch, and
    applies one update. Mono batches train the masked-span objective; real
    parallel batches train supervised CE in both directions; synthetic
    parallel batches train CE in their labeled direction only.

    Resumable: pass the checkpoint's optimizer state and step count. Step t
    always draws from the stream "{label}:step{t}" regardless of where the
    run started.
    """
    if stage_tag not in ("1", "2a", "2b"):
        raise ConfigError(f"run_algorithm1 got stage tag {stage_tag!r}")
    if start_step < 0 or start_step > spec.steps:
        raise ConfigError(f"start_step {start_step} outside [0, {spec.steps}]")
    policy = SamplingPolicy(ctx.cfg.p_parallel, ctx.cfg.temperature).validate()
    if opt is None:
        opt = OptimState.init(params.arrays, kind=spec.optimizer)
    sched = LrSchedule(spec.lr.peak, spec.lr.warmup, spec.lr.total).validate()
    mcfg = ctx.model_cfg
    interval = spec.checkpoint_interval

    def meta():
        return {"model": asdict(mcfg), "stage_label": label}

    with AuditLog(os.path.join(ctx.out_dir, f"audit.{label}.tsv"),
                  append=start_step > 0) as audit:
        for t in range(start_step, spec.steps):
            rng = named_rng(ctx.cfg.seed, f"{label}:step{t}")
            ds = choose_dataset(datasets, policy, rng)
            batch = draw_batch(ds, ctx.cfg.batch_size, rng)
            if batch.kind == "mono":
                loss = mass_loss(params, mcfg, batch.src_ids, batch.lang, rng)
                obj, src_l, tgt_l = "mass", batch.lang, batch.lang
            elif ds.synthetic:
                loss = cross_entropy_loss(params, mcfg, batch.src_ids,
                                          batch.tgt_ids, batch.tgt_lang)
                obj, src_l, tgt_l = "ce", batch.src_lang, batch.tgt_lang
            else:
                fwd = cross_entropy_loss(params, mcfg, batch.src_ids,
                                         batch.tgt_ids, batch.tgt_lang)
                rev = cross_entropy_loss(params, mcfg, batch.tgt_ids,
                                         batch.src_ids, batch.src_lang)
                loss = T.add(fwd, rev)
                obj, src_l, tgt_l = "ce2", batch.src_lang, batch.tgt_lang
            val = float(loss.data)
            if not np.isfinite(val):
                raise NumericError(
                    f"non-finite loss at {label} step {t} (dataset {ds.id})")
            grads = T.backward(loss, params.tensors)
            optimizer_step(params.arrays, grads, opt, lr_at(sched, t),
                           weight_decay=spec.weight_decay,
                           clip_norm=spec.clip_norm or None)
            audit.note(t, ds.id, obj, src_l, tgt_l, val)
            done = t + 1
            if done % 500 == 0 or done == spec.steps:
                ctx.say(f"[{label}] step {done}/{spec.steps} loss {val:.4f}")
            if interval and done % interval == 0 and done < spec.steps:
                ck = Checkpoint(params, opt, stage_tag, done,
                                ctx.vocab_digest, ctx.config_digest, meta())
                save_checkpoint(ck, os.path.join(
                    ctx.out_dir, f"{label}.step{done:06d}.ckpt"))

    final = Checkpoint(params, opt, stage_tag, spec.steps,
                       ctx.vocab_digest, ctx.config_digest, meta())
    save_checkpoint(final, os.path.join(ctx.out_dir, f"{label}.ckpt"))
    return final


def run_stage1(ctx: RunContext, params: ModelParams | None = None,
               opt: OptimState | None = None, start_step: int = 0) -> Checkpoint:
    languages, entries = load_manifest(ctx.manifest_path)
    if any(e.get("synthetic") for e in entries):
        raise DataError("stage 1 must run before any synthetic data exists")
    check_manifest_compat(ctx.cfg, languages, entries)
    _, datasets = ctx.registry()
    if params is None:
        params = init_params(ctx.model_cfg, ctx.cfg.seed)
    return run_algorithm1(ctx, params, datasets, "stage1", ctx.cfg.stage1, "1",
                          opt=opt, start_step=start_step)


def run_stage2(ctx: RunContext, params: ModelParams, label: str,
               extra_entries, opt: OptimState | None = None,
               start_step: int = 0) -> Checkpoint:
    """label is "stage2a" or "stage2b"; extra_entries carries the synthetic
    datasets for this round (and, optionally, kept earlier rounds)."""
    spec = ctx.stage_spec(label)
    languages, entries = load_manifest(ctx.manifest_path)
    check_manifest_compat(ctx.cfg, languages, entries)
    pool = list(entries) + list(extra_entries or [])
    if not any(e.get("synthetic") for e in pool):
        raise DataError(f"{label} expects at least one synthetic parallel dataset")
    _, datasets = ctx.registry(extra_entries=extra_entries)
    return run_algorithm1(ctx, params, datasets, label, spec,
                          STAGE_TAGS[label], opt=opt, start_step=start_step)


# ---------------------------------------------------------------------------
# synthetic parallel data


def _decode_lines(ctx, params, lines, tgt_lang):
    return translate_corpus(params, ctx.model_cfg, ctx.vocab, lines, tgt_lang,
                            max_len=ctx.cfg.eval.max_len,
                            batch_size=ctx.cfg.eval.batch_size)


def _write_lines(path, lines):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def generate_synthetic(ctx: RunContext, params: ModelParams, round_idx: int):
    """Decode slices of the mono corpora into synthetic parallel datasets.

    Round 1: for each target X, a fraction of X's mono corpus is decoded into
    English, giving (decoded English, original X) pairs labeled English->X.
    Round 2: a disjoint slice of X mono, `round2_multiplier` times larger, is
    decoded the same way, and additionally a disjoint slice of English mono is
    decoded into each X, giving (decoded X, original English) pairs labeled
    X->English. Selection uses one permutation per corpus, so rounds never
    reuse a line. Returns manifest-style entries with absolute paths.
    """
    if round_idx not in (1, 2):
        raise ConfigError(f"synthetic round must be 1 or 2, got {round_idx}")
    languages, entries = load_manifest(ctx.manifest_path)
    english, targets = _english_and_targets(languages)
    root = os.path.dirname(os.path.abspath(ctx.manifest_path))
    mono = {e["lang"]: e for e in entries if e["kind"] == "mono"}
    syn = ctx.cfg.synthetic
    out_root = os.path.join(ctx.out_dir, "synthetic")
    os.makedirs(out_root, exist_ok=True)

    def mono_lines(lang):
        if lang not in mono:
            raise DataError(f"no mono dataset for {lang!r} in the manifest")
        return mono[lang], read_lines(os.path.join(root, mono[lang]["path"]))

    out_entries = []
    sidecars = []
    for x in targets:
        entry, lines = mono_lines(x)
        n = len(lines)
        k = int(syn.round1_mono_fraction * n)
        if k < 1:
            raise DataError(
                f"round-1 fraction {syn.round1_mono_fraction} of {n} {x} lines "
                "selects nothing")
        perm = named_rng(ctx.cfg.seed, f"synthetic:mono:{x}").permutation(n)
        if round_idx == 1:
            sel = np.sort(perm[:k])
        else:
            k2 = k * syn.round2_multiplier
            if k + k2 > n:
                raise DataError(
                    f"round 2 needs {k + k2} distinct {x} lines, corpus has {n}")
            sel = np.sort(perm[k:k + k2])
        src_texts = [lines[i] for i in sel]
        ctx.say(f"[synthetic r{round_idx}] decoding {len(sel)} {x} lines into {english}")
        decoded = _decode_lines(ctx, params, src_texts, english)
        stem = f"r{round_idx}.{english}-{x}"
        en_path = os.path.join(out_root, f"{stem}.{english}.txt")
        x_path = os.path.join(out_root, f"{stem}.{x}.txt")
        _write_lines(en_path, decoded)
        _write_lines(x_path, src_texts)
        out_entries.append({"id": f"synth.{stem}", "kind": "parallel",
                            "src": english, "tgt": x,
                            "src_path": en_path, "tgt_path": x_path,
                            "synthetic": True})
        sidecars.append((os.path.join(out_root, f"{stem}.meta.json"), {
            "round": round_idx, "source_dataset": entry["id"],
            "line_indices": [int(i) for i in sel],
            "empty_decodes": sum(1 for d in decoded if not d)}))

    if round_idx == 2:
        entry, en_lines = mono_lines(english)
        n = len(en_lines)
        m = syn.english_lines_per_target
        perm = named_rng(ctx.cfg.seed, f"synthetic:mono:{english}").permutation(n)
        for i, x in enumerate(targets):
            if (i + 1) * m > n:
                raise DataError(
                    f"round 2 needs {(i + 1) * m} {english} lines for "
                    f"{len(targets)} targets, corpus has {n}")
            sel = np.sort(perm[i * m:(i + 1) * m])
            src_texts = [en_lines[j] for j in sel]
            ctx.say(f"[synthetic r2] decoding {m} {english} lines into {x}")
            decoded = _decode_lines(ctx, params, src_texts, x)
            stem = f"r2.{x}-{english}"
            x_path = os.path.join(out_root, f"{stem}.{x}.txt")
            en_path = os.path.join(out_root, f"{stem}.{english}.txt")
            _write_lines(x_path, decoded)
            _write_lines(en_path, src_texts)
            out_entries.append({"id": f"synth.{stem}", "kind": "parallel",
                                "src": x, "tgt": english,
                                "src_path": x_path, "tgt_path": en_path,
                                "synthetic": True})
            sidecars.append((os.path.join(out_root, f"{stem}.meta.json"), {
                "round": 2, "source_dataset": entry["id"],
                "line_indices": [int(j) for j in sel],
                "empty_decodes": sum(1 for d in decoded if not d)}))

    for path, doc in sidecars:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")
    entries_path = os.path.join(out_root, f"r{round_idx}.entries.json")
    with open(entries_path, "w", encoding="utf-8") as fh:
        json.dump(out_entries, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return out_entries


def load_entries(path):
    """Read back an entries file written by generate_synthetic."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read entries file {path}: {e}") from None
    if not isinstance(doc, list):
        raise DataError(f"{path}: expected a JSON list of dataset entries")
    return doc


# ---------------------------------------------------------------------------
# stage 3: deterministic sweeps


def predict_sweep(languages, datasets, pivots, objectives=None):
    """The exact, ordered update plan for one stage-3 sweep.

    Returns (dataset_id, objective, src_lang, tgt_lang) tuples, where src/tgt
    name the direction the update trains. English mono back-translates through
    every target; target mono back-translates through English and each of its
    pivots; auxiliary mono is skipped; real parallel data cross-translates
    through every target it pivots for; synthetic data trains plain CE in its
    labeled direction. The trainer executes this list literally, so audit
    logs can be checked against it.
    """
    english, targets = _english_and_targets(languages)
    allow = set(objectives) if objectives is not None else {"bt", "ct", "ce"}
    plan = []
    for ds in datasets:
        if ds.kind == "mono":
            if "bt" not in allow:
                continue
            if ds.lang == english:
                for t in targets:
                    plan.append((ds.id, "bt", t, english))
            elif ds.lang in targets:
                for via in [english] + sorted(pivots.get(ds.lang, [])):
                    plan.append((ds.id, "bt", via, ds.lang))
        elif ds.synthetic:
            if "ce" in allow:
                plan.append((ds.id, "ce", ds.src, ds.tgt))
        else:
            if "ct" not in allow:
                continue
            aux = ds.tgt if ds.src == english else ds.src
            for t in targets:
                if aux in pivots.get(t, []):
                    plan.append((ds.id, "ct", t, english))
    return plan


def _load_eval_sets(testsets_path, split):
    doc = load_testsets(testsets_path)
    root = os.path.dirname(os.path.abspath(testsets_path))
    sets = []
    for d in doc["eval_directions"]:
        s, t = d.split("-")
        sets.append((read_lines(os.path.join(root, doc[split][s])),
                     read_lines(os.path.join(root, doc[split][t])), d))
    return sets


def _mean_bleu(ctx, params, sets):
    rows = evaluate_model(params, ctx.model_cfg, ctx.vocab, sets,
                          mode=ctx.cfg.eval.mode, max_len=ctx.cfg.eval.max_len,
                          batch_size=ctx.cfg.eval.batch_size)
    return sum(r.bleu.score for r in rows) / len(rows), rows


def run_stage3(ctx: RunContext, params: ModelParams, extra_entries,
               objectives=None) -> Checkpoint:
    """Fine-tune with back-translation, cross-translation, and synthetic CE.

    Deterministic: no sampling. Batches come from a fixed length-bucketed
    partition of each dataset; sweep s uses batch s modulo the partition size.
    A decode that comes back empty for the whole batch is logged as a skip
    and costs no update. Dev BLEU is checked every `eval_every` sweeps; after
    `patience` checks without improvement the run stops and the best
    parameters are restored.
    """
    spec = ctx.cfg.stage3
    languages, entries = load_manifest(ctx.manifest_path)
    check_manifest_compat(ctx.cfg, languages, entries)
    english, _ = _english_and_targets(languages)
    _, datasets = ctx.registry(extra_entries=extra_entries)
    plan = predict_sweep(languages, datasets, ctx.cfg.pivots, objectives)
    if not plan:
        raise DataError("stage 3 plan is empty: nothing to train")
    by_id = {ds.id: ds for ds in datasets}
    batches = {}
    for ds_id in {p[0] for p in plan}:
        batches[ds_id] = bucket_batches(by_id[ds_id], spec.max_tokens,
                                        spec.bucket_width)
        if not batches[ds_id]:
            raise DataError(f"dataset {ds_id} produced no batches")

    opt = OptimState.init(params.arrays, kind=spec.optimizer)
    lr = ctx.cfg.stage1.lr.peak / spec.lr_divisor
    mcfg = ctx.model_cfg

    dev_sets = None
    if ctx.cfg.testsets and spec.eval_every > 0:
        dev_sets = _load_eval_sets(ctx.cfg.testsets, "dev")
    best_score = None
    best_params = None
    best_opt = None
    stale = 0
    attempt = 0
    sweeps_run = 0

    with AuditLog(os.path.join(ctx.out_dir, "audit.stage3.tsv")) as audit:
        for sweep in range(spec.sweeps):
            for ds_id, obj, src_l, tgt_l in plan:
                ds = by_id[ds_id]
                blist = batches[ds_id]
                batch = blist[sweep % len(blist)]
                if obj == "bt":
                    res = back_translation_loss(params, mcfg, batch.src_ids,
                                                x_lang=tgt_l, via_lang=src_l,
                                                max_len=spec.max_len)
                    loss = res.loss
                elif obj == "ct":
                    if ds.src == english:
                        x_block, y_block = batch.tgt_ids, batch.src_ids
                        x_lang = ds.tgt
                    else:
                        x_block, y_block = batch.src_ids, batch.tgt_ids
                        x_lang = ds.src
                    res = cross_translation_loss(params, mcfg, x_block, y_block,
                                                 src_lang=x_lang, tgt_lang=tgt_l,
                                                 via_lang=src_l,
                                                 max_len=spec.max_len)
                    loss = res.loss
                else:
                    loss = cross_entropy_loss(params, mcfg, batch.src_ids,
                                              batch.tgt_ids, batch.tgt_lang)
                if loss is None:
                    audit.note(attempt, ds_id, obj, src_l, tgt_l, None)
                    attempt += 1
                    continue
                val = float(loss.data)
                if not np.isfinite(val):
                    raise NumericError(
                        f"non-finite loss at stage3 sweep {sweep} "
                        f"(dataset {ds_id}, {obj})")
                grads = T.backward(loss, params.tensors)
                optimizer_step(params.arrays, grads, opt, lr,
                               weight_decay=spec.weight_decay,
                               clip_norm=spec.clip_norm or None)
                audit.note(attempt, ds_id, obj, src_l, tgt_l, val)
                attempt += 1
            sweeps_run = sweep + 1
            ctx.say(f"[stage3] sweep {sweeps_run}/{spec.sweeps} done "
                    f"({attempt} updates attempted)")
            if dev_sets and sweeps_run % spec.eval_every == 0:
                score, rows = _mean_bleu(ctx, params, dev_sets)
                detail = " ".join(f"{r.direction}={r.bleu.score:.2f}" for r in rows)
                ctx.say(f"[stage3] dev mean {score:.2f} ({detail})")
                if best_score is None or score > best_score:
                    best_score = score
                    best_params = params.copy()
                    best_opt = (opt.m.copy(), opt.v.copy(), opt.step)
                    stale = 0
                else:
                    stale += 1
                    if spec.patience and stale >= spec.patience:
                        ctx.say(f"[stage3] stopping early after {sweeps_run} sweeps")
                        break

    if best_params is not None:
        for k, v in best_params.arrays.items():
            np.copyto(params.arrays[k], v)
        opt.m, opt.v, opt.step = best_opt

    meta = {"model": asdict(mcfg), "stage_label": "stage3",
            "sweeps_run": sweeps_run, "best_dev": best_score}
    final = Checkpoint(params, opt, "3", attempt, ctx.vocab_digest,
                       ctx.config_digest, meta)
    save_checkpoint(final, os.path.join(ctx.out_dir, "stage3.ckpt"))
    return final


# ---------------------------------------------------------------------------
# the whole pipeline


def _sha16(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:16]


def _filtered_manifest(manifest_path, drop_ids, out_dir):
    """Copy of the manifest without the named datasets, paths made absolute."""
    languages, entries = load_manifest(manifest_path)
    root = os.path.dirname(os.path.abspath(manifest_path))
    known = {e["id"] for e in entries}
    missing = sorted(set(drop_ids) - known)
    if missing:
        raise ConfigError([f"cannot drop unknown dataset {d!r}" for d in missing])
    kept = []
    for e in entries:
        if e["id"] in set(drop_ids):
            continue
        e = dict(e)
        for key in ("path", "src_path", "tgt_path"):
            if key in e:
                e[key] = os.path.abspath(os.path.join(root, e[key]))
        kept.append(e)
    path = os.path.join(out_dir, "manifest.filtered.json")
    save_manifest(path, languages, kept)
    return path


def build_context(cfg: ExperimentConfig, out_dir, quiet: bool = False,
                  arm: ArmOptions | None = None) -> RunContext:
    """Resolve data, train the vocabulary, and fix the model geometry.

    If the config names no manifest, a benchmark is generated under
    out_dir/benchmark (its seed defaults to the experiment seed). The
    returned context's cfg is a resolved copy; the caller's is untouched.
    """
    arm = arm or ArmOptions()
    cfg = copy.deepcopy(cfg)
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    if cfg.manifest is None:
        bench = dict(cfg.benchmark)
        bench.setdefault("seed", cfg.seed)
        bcfg = BenchmarkConfig(out_dir=os.path.join(out_dir, "benchmark"), **bench)
        if not quiet:
            print(f"[data] building benchmark in {bcfg.out_dir}", flush=True)
        paths = build_benchmark(bcfg)
        cfg.manifest = paths["manifest"]
        cfg.testsets = paths["testsets"]
    manifest_path = cfg.manifest
    if arm.drop_datasets:
        manifest_path = _filtered_manifest(manifest_path, arm.drop_datasets, out_dir)
        cfg.manifest = manifest_path

    languages, entries = load_manifest(manifest_path)
    root = os.path.dirname(os.path.abspath(manifest_path))
    lines = []
    for e in entries:
        if e["kind"] == "mono":
            lines.extend(read_lines(os.path.join(root, e["path"])))
        else:
            lines.extend(read_lines(os.path.join(root, e["src_path"])))
            lines.extend(read_lines(os.path.join(root, e["tgt_path"])))
    if not quiet:
        print(f"[vocab] training BPE ({cfg.vocab_size} pieces) on "
              f"{len(lines)} lines", flush=True)
    vocab = train_bpe(lines, cfg.vocab_size, seed=cfg.seed)
    vocab_path = os.path.join(out_dir, "vocab.txt")
    save_vocab(vocab, vocab_path)

    mcfg = ModelConfig(languages=[l.name for l in languages],
                       vocab_size=vocab.size, layers=cfg.model.layers,
                       hidden=cfg.model.hidden, ffn=cfg.model.ffn,
                       heads=cfg.model.heads,
                       max_positions=cfg.model.max_positions).validate()
    return RunContext(cfg, mcfg, vocab, manifest_path, out_dir,
                      vocab_digest(vocab_path), config_digest(cfg), quiet)


def _report(ctx, params, test_sets, label, scores):
    if not test_sets:
        return
    rows = evaluate_model(params, ctx.model_cfg, ctx.vocab, test_sets,
                          mode=ctx.cfg.eval.mode, max_len=ctx.cfg.eval.max_len,
                          batch_size=ctx.cfg.eval.batch_size)
    write_report(rows, os.path.join(ctx.out_dir, f"report.{label}.tsv"),
                 os.path.join(ctx.out_dir, f"report.{label}.json"))
    scores[label] = {r.direction: round(r.bleu.score, 4) for r in rows}
    detail = " ".join(f"{r.direction}={r.bleu.score:.2f}" for r in rows)
    ctx.say(f"[eval] {label}: {detail}")


def run_pipeline(cfg: ExperimentConfig, out_dir, quiet: bool = False,
                 arm: ArmOptions | None = None) -> dict:
    """Data, vocab, stage 1, two synthetic rounds with stage-2 training,
    stage 3, and per-stage test reports. Returns a summary dict, also written
    to out_dir/summary.json. Wall-clock timestamps only ever land in
    run_meta.json, so everything else is byte-stable for a fixed config."""
    arm = arm or ArmOptions()
    started = time.time()
    ctx = build_context(cfg, out_dir, quiet=quiet, arm=arm)
    cfg = ctx.cfg

    with open(os.path.join(out_dir, "resolved_config.json"), "w",
              encoding="utf-8") as fh:
        json.dump(to_dict(cfg), fh, indent=1, sort_keys=True)
        fh.write("\n")

    test_sets = _load_eval_sets(cfg.testsets, "test") if cfg.testsets else None
    scores = {}

    params = init_params(ctx.model_cfg, cfg.seed)
    run_stage1(ctx, params)
    _report(ctx, params, test_sets, "stage1", scores)

    extras_2b = []
    if arm.use_synthetic:
        r1 = generate_synthetic(ctx, params, 1)
        run_stage2(ctx, params, "stage2a", r1)
        _report(ctx, params, test_sets, "stage2a", scores)
        r2 = generate_synthetic(ctx, params, 2)
        extras_2b = list(r2) + (list(r1) if cfg.synthetic.keep_round1 else [])
        run_stage2(ctx, params, "stage2b", extras_2b)
        _report(ctx, params, test_sets, "stage2b", scores)
    else:
        # compute-matched ablation: same stage-2 budgets, real data only
        _, datasets = ctx.registry()
        run_algorithm1(ctx, params, datasets, "stage2a", cfg.stage2a, "2a")
        _report(ctx, params, test_sets, "stage2a", scores)
        run_algorithm1(ctx, params, datasets, "stage2b", cfg.stage2b, "2b")
        _report(ctx, params, test_sets, "stage2b", scores)

    ck = run_stage3(ctx, params, extras_2b, objectives=arm.stage3_objectives)
    _report(ctx, params, test_sets, "stage3", scores)

    summary = {"stages": scores, "best_dev": ck.meta.get("best_dev"),
               "vocab_digest": ctx.vocab_digest,
               "config_digest": ctx.config_digest,
               "manifest_digest": _sha16(ctx.manifest_path),
               "out_dir": os.path.abspath(out_dir)}
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "run_meta.json"), "w", encoding="utf-8") as fh:
        json.dump({"started": started, "finished": time.time()}, fh, indent=1)
        fh.write("\n")
    return summary
