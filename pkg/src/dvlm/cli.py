"""``dvlm`` command suite.

Exit status: 0 on success, 1 when a command fails at run time, 2 for bad
usage, unreadable config or a missing corpus/checkpoint.

Configuration comes from built-in defaults, then an optional ``--config``
file of ``key=value`` lines, then command-line flags (flags win). ``train``
writes the resolved configuration next to the checkpoint.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import bench
from .checkpoint import format_kv, load_checkpoint, read_kv, save_checkpoint
from .errors import ConfigError
from .model import DiffusionVLM, ModelConfig
from .recipes import REFERENCE_MODEL, REFERENCE_STAGE2, REFERENCE_TASK
from .sampler import GenRequest, InfillRequest, generate, infill, write_trace
from .schedules import ScheduleSpec, discretize, steps_for_nfe
from .tasks import (
    CAPTION_PROMPT,
    TrainExample,
    ToyTask,
    acrostic_constraints,
    default_vocab,
    image_from_spec,
    parse_caption,
)
from .trainer import TrainConfig, Trainer, fim_subset, pick_round
from .vocab import Vocab

log = logging.getLogger("dvlm")

# Defaults are the reference recipe's stage-2 settings.
_T = REFERENCE_TASK
TASK_DEFAULTS = {"task": _T.name, "n_train": _T.n_train, "n_val": _T.n_val, "L": _T.L, "max_objects": _T.max_objects,
                 "data_seed": _T.seed}
MODEL_DEFAULTS = dict(REFERENCE_MODEL)
TRAIN_DEFAULTS = {"steps": REFERENCE_STAGE2.steps, "lr": REFERENCE_STAGE2.lr, "warmup": REFERENCE_STAGE2.warmup}
SAMPLE_DEFAULTS = {"schedule": "shift", "alpha": 1 / 3, "nfe": 1.0, "remask": "confidence", "temperature": 0.0}


# written into a resolved config for provenance; accepted but unused on reload
RECORD_KEYS = {"corpus_records", "init_from"}


class UsageError(Exception):
    pass


def _typed_keys(cls) -> dict:
    return {f.name: f.type for f in fields(cls)}


def resolve_config(path: Optional[str], overrides: dict) -> dict:
    """defaults < config file < flags."""
    cfg = {**TASK_DEFAULTS, **MODEL_DEFAULTS, **TRAIN_DEFAULTS, **SAMPLE_DEFAULTS}
    known = set(cfg) | set(_typed_keys(ModelConfig)) | set(_typed_keys(TrainConfig)) | RECORD_KEYS
    if path:
        try:
            file_cfg = read_kv(path)
        except OSError as e:
            raise UsageError(f"cannot read config {path}: {e.strerror}") from None
        except ValueError as e:
            raise UsageError(f"{path}: {e}") from None
        unknown = set(file_cfg) - known
        if unknown:
            raise UsageError(f"{path}: unknown keys {sorted(unknown)}")
        cfg.update(file_cfg)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def model_config(cfg: dict, vocab: Vocab) -> ModelConfig:
    return ModelConfig.from_dict({**cfg, "vocab_size": vocab.size})


def train_config(cfg: dict) -> TrainConfig:
    types = _typed_keys(TrainConfig)
    kw = {}
    for k, t in types.items():
        if k in cfg:
            v = cfg[k]
            if isinstance(v, str):
                v = {"int": int, "float": float, "bool": lambda s: s.lower() in ("1", "true", "yes")}.get(t, str)(v)
            kw[k] = v
    return TrainConfig(**kw)


def schedule_spec(cfg: dict) -> ScheduleSpec:
    return ScheduleSpec(str(cfg["schedule"]), float(cfg["alpha"]))


def task_of(cfg: dict) -> ToyTask:
    return ToyTask(str(cfg["task"]), int(cfg["data_seed"]), int(cfg["n_train"]), int(cfg["n_val"]),
                   int(cfg["L"]), max_objects=int(cfg["max_objects"]))


# corpus files: image-spec TAB prompt TAB answer [TAB prompt TAB answer ...]

def write_corpus(path: Path, examples: Sequence[TrainExample], vocab: Vocab) -> None:
    with open(path, "w") as f:
        for ex in examples:
            answer = vocab.decode(t for t in ex.answer if t not in (vocab.eos_id, vocab.pad_id))
            f.write(f"{ex.image_spec or '-'}\t{vocab.decode(ex.prompt)}\t{answer}\n")


def read_corpus(path: Path, vocab: Vocab, L: int, image_size: int, seed: int = 0) -> list[TrainExample]:
    """Multi-round records contribute one uniformly chosen round each."""
    rng = np.random.default_rng(seed)
    out = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise UsageError(f"cannot read corpus {path}: {e.strerror}") from None
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 3 or len(parts) % 2 == 0:
            raise UsageError(f"{path}:{n}: expected image-spec, then prompt/answer pairs")
        rounds = [(vocab.encode(parts[i]), vocab.encode(parts[i + 1])) for i in range(1, len(parts), 2)]
        prompt, answer = pick_round(rounds, rng)
        out.append(TrainExample(image_from_spec(parts[0], image_size), prompt, vocab.pad_answer(answer, L),
                                parts[0], vocab.decode(answer)))
    if not out:
        raise UsageError(f"corpus {path} is empty")
    return out


def _examples(cfg: dict, vocab: Vocab, corpus: Optional[str], image_size: int):
    if corpus:
        return read_corpus(Path(corpus), vocab, int(cfg["L"]), image_size, int(cfg.get("seed", 0))), []
    return task_of(cfg).build(vocab)


def _load(path: Optional[str]) -> tuple[DiffusionVLM, Vocab]:
    if not path or not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_corpus(args, cfg) -> None:
    vocab = default_vocab()
    train, val = task_of(cfg).build(vocab)
    out = _out(args)
    write_corpus(out / "train.tsv", train, vocab)
    if val:
        write_corpus(out / "val.tsv", val, vocab)
    print(f"wrote {len(train)} train and {len(val)} val records to {out}")


def cmd_train(args, cfg) -> None:
    out = _out(args)
    if args.init_from:
        model, vocab = _load(args.init_from)
    else:
        vocab = default_vocab()
        torch.manual_seed(int(cfg["seed"]))
        model = DiffusionVLM(model_config(cfg, vocab))
    examples, _ = _examples(cfg, vocab, args.corpus, model.cfg.image_size)
    tcfg = train_config(cfg)
    if tcfg.stage == "fim":
        examples = fim_subset(examples, tcfg.fim_fraction, tcfg.seed)
    cfg["corpus_records"] = len(examples)
    torch.manual_seed(tcfg.seed)
    Trainer(model, vocab, tcfg).fit(examples, out / "metrics.csv", log_every=args.log_every)
    save_checkpoint(out / "model.ckpt", model, vocab)
    model_keys = set(_typed_keys(ModelConfig))
    resolved = {k: v for k, v in {**cfg, **vars(tcfg)}.items() if k not in model_keys}
    resolved["init_from"] = args.init_from or ""
    (out / "config.txt").write_text(format_kv(resolved) + model.cfg.to_text())
    print(f"stage {tcfg.stage}: {tcfg.steps} steps on {len(examples)} records -> {out / 'model.ckpt'}")


def _prompt_and_vision(model, vocab, args):
    prompt = vocab.encode(args.prompt)
    img = image_from_spec(args.image, model.cfg.image_size)
    vision = None
    if img is not None:
        with torch.no_grad():
            vision = model.encode_image(img)
    return prompt, vision


def cmd_generate(args, cfg) -> None:
    model, vocab = _load(args.checkpoint)
    prompt, vision = _prompt_and_vision(model, vocab, args)
    L = int(cfg["L"])
    sched = discretize(schedule_spec(cfg), L, steps_for_nfe(float(cfg["nfe"]), L))
    req = GenRequest(prompt, L, sched, vision=vision, remask=str(cfg["remask"]), temperature=float(cfg["temperature"]),
                     use_cache=not args.no_cache, seed=int(cfg["seed"]), trace=bool(args.trace))
    res = generate(model, vocab, req)
    print(res.text(vocab))
    print(f"forward_passes={res.forward_passes}", file=sys.stderr)
    if args.trace:
        write_trace(Path(args.trace), res.trace)


def cmd_infill(args, cfg) -> None:
    model, vocab = _load(args.checkpoint)
    draft = vocab.encode(args.draft)
    if vocab.mask_id not in draft:
        print(args.draft)
        return
    prompt, vision = _prompt_and_vision(model, vocab, args)
    req = InfillRequest(draft, prompt, schedule_spec(cfg), float(cfg["nfe"]), vision=vision,
                        remask=str(cfg["remask"]), temperature=float(cfg["temperature"]),
                        use_cache=not args.no_cache, seed=int(cfg["seed"]), trace=bool(args.trace))
    res = infill(model, vocab, req)
    print(vocab.decode(res.tokens) if args.raw else res.text(vocab))
    print(f"forward_passes={res.forward_passes}", file=sys.stderr)
    if args.trace:
        write_trace(Path(args.trace), res.trace)


def _eval_pool(cfg, vocab, args, image_size):
    train, val = _examples(cfg, vocab, args.corpus, image_size)
    return val or train


def cmd_sweep(args, cfg) -> None:
    model, vocab = _load(args.checkpoint)
    pool = _eval_pool(cfg, vocab, args, model.cfg.image_size)
    nfes = [float(x) for x in args.nfe_list.split(",")]
    seeds = range(int(cfg["seed"]), int(cfg["seed"]) + args.seeds)
    rows = bench.sweep_speed_quality(model, vocab, pool, nfes, seeds=seeds, n_eval=args.n_eval)
    out = _out(args)
    note = (f"greedy confidence remasking, prefix cache on; latency_s = median wall seconds per sample after one warm-up, serial, "
            f"torch threads={torch.get_num_threads()}; seed selects {args.n_eval} held-out examples")
    bench.write_csv(out / "sweep.csv", rows, bench.SWEEP_COLUMNS, note)
    if args.json:
        bench.write_jsonl(out / "sweep.jsonl", rows)
    for r in rows:
        print(f"{r['family']:<7} {str(r['alpha'])[:6]:<7} nfe={r['nfe']:<5} seed={r['seed']} "
              f"em={r['exact_match']:.3f} f1={r['token_f1']:.3f} {r['latency_s'] * 1000:.1f}ms")


def cmd_bench_cache(args, cfg) -> None:
    model, vocab = _load(args.checkpoint)
    pool = _eval_pool(cfg, vocab, args, model.cfg.image_size)
    examples = bench.seeded_subset(pool, args.n_eval, int(cfg["seed"]))
    ratios = [float(x) for x in args.ratios.split(",")]
    rows = bench.bench_cache(model, vocab, examples, ratios, float(cfg["nfe"]), args.repeats, schedule_spec(cfg))
    out = _out(args)
    note = (f"prefix padded by tiling vision embeddings; answer length fixed; median of {args.repeats} runs after "
            f"one warm-up, mean over {len(examples)} examples; torch threads={torch.get_num_threads()}")
    bench.write_csv(out / "cache.csv", rows, bench.CACHE_COLUMNS, note)
    if args.json:
        bench.write_jsonl(out / "cache.jsonl", rows)
    for r in rows:
        print(f"ratio={r['ratio']:<4} cached={r['cached_s'] * 1000:.1f}ms uncached={r['uncached_s'] * 1000:.1f}ms "
              f"speedup={r['speedup']:.2f} identical={r['outputs_identical']}")


def cmd_acrostic(args, cfg) -> None:
    model, vocab = _load(args.checkpoint)
    cfg = {**cfg, "task": "acrostic"}
    _, val = task_of(cfg).build(vocab)
    examples = val[: args.n_eval]
    report, _ = bench.acrostic_report(model, vocab, examples, float(cfg["nfe"]), schedule_spec(cfg))
    base = bench.free_generation_report(model, vocab, examples,
                                        [acrostic_constraints(parse_caption(e.text)) for e in examples],
                                        float(cfg["nfe"]), schedule_spec(cfg))
    print(f"{'method':<20} sentence sample")
    print(base.row("free generation"))
    print(report.row("infill"))


def cmd_schedule(args, cfg) -> None:
    L = int(cfg["L"])
    ds = discretize(schedule_spec(cfg), L, steps_for_nfe(float(cfg["nfe"]), L))
    print(ds.to_csv())
    print("reveal sizes:", " ".join(map(str, ds.reveal_sizes())))


COMMANDS = {
    "corpus": cmd_corpus,
    "train": cmd_train,
    "generate": cmd_generate,
    "infill": cmd_infill,
    "sweep": cmd_sweep,
    "bench-cache": cmd_bench_cache,
    "acrostic": cmd_acrostic,
    "schedule": cmd_schedule,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="run", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    sampling = argparse.ArgumentParser(add_help=False)
    sampling.add_argument("--nfe", type=float, help="forward passes as a fraction of L")
    sampling.add_argument("--schedule", choices=("linear", "cosine", "shift"))
    sampling.add_argument("--alpha", type=float)
    sampling.add_argument("--L", type=int, dest="L")
    sampling.add_argument("--no-cache", action="store_true")
    sampling.add_argument("--checkpoint", help="defaults to <out>/model.ckpt")
    sampling.add_argument("--remask", choices=("confidence", "random"))
    sampling.add_argument("--temperature", type=float)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--corpus", help="TSV corpus; default is the configured synthetic task")
    data.add_argument("--task", choices=("grid-caption", "acrostic", "memorize"))

    p = argparse.ArgumentParser(prog="dvlm", description="Desk-scale masked diffusion vision-language model")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("corpus", parents=[common, data], help="write the synthetic corpus as TSV")

    t = sub.add_parser("train", parents=[common, data], help="train one stage")
    t.add_argument("--stage", choices=("1", "2", "fim"))
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--init-from", help="start from this checkpoint")
    t.add_argument("--log-every", type=int, default=0)

    for name in ("generate", "infill"):
        g = sub.add_parser(name, parents=[common, sampling], help=f"{name} one answer")
        g.add_argument("--prompt", default=CAPTION_PROMPT)
        g.add_argument("--image", default="-", help="grid-<max_objects>-<seed>, or - for none")
        g.add_argument("--trace", help="write the per-step JSON-lines trace here")
        if name == "infill":
            g.add_argument("draft", help="answer draft with [M] slots, e.g. 'red [M] [M] [FIM]'")
            g.add_argument("--raw", action="store_true", help="print before [S]/[FIM] cleanup")

    s = sub.add_parser("sweep", parents=[common, sampling, data], help="speed/quality sweep -> sweep.csv")
    s.add_argument("--nfe-list", default="0.25,0.5,0.75,1.0")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--n-eval", type=int, default=50)
    s.add_argument("--json", action="store_true", help="also write JSON lines")

    c = sub.add_parser("bench-cache", parents=[common, sampling, data], help="cache benchmark -> cache.csv")
    c.add_argument("--ratios", default="0,1,2,4,8")
    c.add_argument("--repeats", type=int, default=5)
    c.add_argument("--n-eval", type=int, default=5)
    c.add_argument("--json", action="store_true")

    a = sub.add_parser("acrostic", parents=[common, sampling], help="constraint satisfaction report")
    a.add_argument("--n-eval", type=int, default=100)

    sub.add_parser("schedule", parents=[common, sampling], help="print a discretized schedule")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    keys = ("seed", "nfe", "schedule", "alpha", "L", "stage", "steps", "lr", "batch_size", "task", "remask", "temperature")
    overrides = {k: getattr(args, k, None) for k in keys}
    try:
        cfg = resolve_config(args.config, overrides)
        cfg.setdefault("seed", 0)
        if getattr(args, "checkpoint", "unset") is None:
            args.checkpoint = str(Path(args.out) / "model.ckpt")
        COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as e:
        print(f"dvlm: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - report and exit nonzero
        print(f"dvlm: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
