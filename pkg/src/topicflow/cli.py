"""Command-line entry point: staged pipeline runs, the chat REPL and the synthetic corpus generator."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import TextIO

import numpy as np

from . import generation, pipeline
from .contrastive import DivergenceError
from .corpus import CorpusError, split_words
from .encoder import encode
from .structure import StructureGraph, policy_distribution
from .synthetic import make_synthetic, write_synthetic
from .tensorio import CheckpointError

RUN_ROOT_ENV = "TOPICFLOW_RUN_ROOT"
DEFAULT_RUN_ROOT = "runs"

log = logging.getLogger("topicflow")


def _parse_phis(text: str) -> list[float]:
    try:
        phis = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise pipeline.ConfigError(f"--phi: expected a comma list of numbers, got {text!r}") from exc
    if not phis or any(not 0 < p <= 1 for p in phis):
        raise pipeline.ConfigError("--phi values must be in (0, 1]")
    return phis


def resolve_run_dir(cfg: dict, cli_run_dir: str | None) -> Path:
    if cli_run_dir:
        return Path(cli_run_dir)
    if cfg.get("run_dir"):
        return Path(cfg["run_dir"])
    root = Path(os.environ.get(RUN_ROOT_ENV, DEFAULT_RUN_ROOT))
    return root / f"run-{pipeline.config_hash(cfg)[:12]}"


def cmd_pipeline(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.phi is not None:
        overrides["eval.phis"] = _parse_phis(args.phi)
    cfg = pipeline.load_config(args.config, overrides)
    run_dir = resolve_run_dir(cfg, args.run_dir)
    for entry in pipeline.run_pipeline(cfg, run_dir, args.stage):
        print(f"{entry['stage']:<16} {entry['wall_time']:8.2f}s")
    print(f"run directory: {run_dir}")
    report = pipeline.Artifacts(run_dir).report_txt
    if args.stage in ("all", "evaluate") and report.exists():
        print(report.read_text(), end="")
    return pipeline.EXIT_OK


class ChatSession:
    """State for one REPL session over a finished run directory."""

    def __init__(self, run_dir: Path, decoding: dict, seed: int = 0):
        cfg_path = run_dir / "config.json"
        if not cfg_path.exists():
            raise pipeline.MissingPrerequisite("config.json", "ingest")
        cfg = json.loads(cfg_path.read_text())
        cfg["generation"].update({k: v for k, v in decoding.items() if v is not None})
        self.pipe = pipeline.Pipeline(cfg, run_dir)
        self.gcfg = pipeline.generation_cfg(self.pipe.cfg)
        self.vocab = self.pipe.vocab()
        self.model = generation.GeneratorModel.load(self.pipe._need("generator"), self.vocab.hash)
        self.encoder = self.pipe.encoder()
        self.clusters = self.pipe.clusters()
        self.policy = self.pipe.policy()
        graph_path = self.pipe.art.graph
        self.graph = StructureGraph.load(graph_path) if graph_path.exists() else None
        self.seed = seed
        self.history: list[tuple[str, tuple[int, ...]]] = []
        self.transcript: list[dict] = []

    def topics(self) -> str:
        lines = []
        meta = self.graph.vertex_meta if self.graph is not None else [
            {"cluster": j, "size": int(np.sum(self.clusters.assignments == j)), "samples": []}
            for j in range(self.clusters.k)
        ]
        for m in meta:
            samples = " | ".join(m.get("samples", [])[:2])
            lines.append(f"  topic {m['cluster']:>3}  size={m['size']:<5} {samples}")
        return "\n".join(lines)

    def _context(self) -> tuple[int, ...]:
        ctx: list[int] = []
        for speaker, toks in self.history[-self.gcfg.max_context_turns:]:
            ctx.append(self.vocab.speaker_id(speaker))
            ctx.extend(toks)
        return tuple(ctx[-self.gcfg.max_context_tokens:])

    def turn(self, text: str) -> dict:
        toks = tuple(self.vocab.encode_words(split_words(text))) or (self.vocab.unk_id,)
        self.history.append(("A", toks))
        q = policy_distribution(encode(toks, self.encoder), self.policy, self.clusters)
        order = np.argsort(-q, kind="stable")[:3]
        hyp = generation.decode(self._context(), self.model, self.gcfg, seed=self.seed + len(self.transcript),
                                bos_id=self.vocab.bos_id, eos_id=self.vocab.eos_id)
        self.history.append(("B", tuple(hyp)))
        record = {
            "turn": len(self.transcript),
            "user": text,
            "response": self.vocab.decode(hyp),
            "topic": int(order[0]),
            "probability": float(q[order[0]]),
            "alternatives": [{"topic": int(j), "probability": float(q[j])} for j in order],
        }
        self.transcript.append(record)
        return record

    def save(self) -> Path:
        path = self.pipe.art.root / "chat" / "transcript.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.transcript:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return path


def chat_loop(session: ChatSession, stdin: TextIO, stdout: TextIO) -> Path:
    stdout.write("type a message; /topics lists topics, /quit exits\n")
    while True:
        stdout.write("you> ")
        stdout.flush()
        line = stdin.readline()
        if not line:
            stdout.write("\n")
            break
        text = line.strip()
        if not text:
            continue
        if text in ("/quit", "/exit"):
            break
        if text == "/topics":
            stdout.write(session.topics() + "\n")
            continue
        rec = session.turn(text)
        alts = ", ".join(f"{a['topic']} ({a['probability']:.2f})" for a in rec["alternatives"])
        stdout.write(f"bot> {rec['response']}\n")
        stdout.write(f"     next topic {rec['topic']} p={rec['probability']:.3f}; top-3: {alts}\n")
    return session.save()


def cmd_chat(args) -> int:
    decoding = {"decoding": args.decoding, "top_k": args.top_k, "top_p": args.top_p,
                "beam_width": args.beam_width, "temperature": args.temperature}
    session = ChatSession(Path(args.run_dir), decoding, seed=args.seed)
    path = chat_loop(session, sys.stdin, sys.stdout)
    print(f"transcript saved to {path}")
    return pipeline.EXIT_OK


def cmd_make_synthetic(args) -> int:
    if args.k_topics < 2:
        raise pipeline.ConfigError("--k-topics must be >= 2")
    if args.conversations < 1:
        raise pipeline.ConfigError("--conversations must be >= 1")
    data = make_synthetic(args.k_topics, args.conversations, args.seed, stickiness=args.stickiness)
    for name, path in write_synthetic(data, args.out).items():
        print(f"{name}: {path}")
    return pipeline.EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="topicflow", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one pipeline stage or all of them")
    run.add_argument("--config", help="JSON config file (defaults are used for missing keys)")
    run.add_argument("--stage", default="all", choices=pipeline.STAGES + ("all",))
    run.add_argument("--run-dir", help=f"run directory (default: ${RUN_ROOT_ENV}/run-<config hash>)")
    run.add_argument("--seed", type=int, help="override the global seed")
    run.add_argument("--phi", help="comma list of STHA thresholds, e.g. 0.95,0.9")
    run.set_defaults(func=cmd_pipeline)

    chat = sub.add_parser("chat", help="talk to a trained run")
    chat.add_argument("--run-dir", required=True)
    chat.add_argument("--decoding", choices=generation.DECODING)
    chat.add_argument("--top-k", type=int)
    chat.add_argument("--top-p", type=float)
    chat.add_argument("--beam-width", type=int)
    chat.add_argument("--temperature", type=float)
    chat.add_argument("--seed", type=int, default=0)
    chat.set_defaults(func=cmd_chat)

    syn = sub.add_parser("make-synthetic", help="write a synthetic topic-chain corpus with ground truth")
    syn.add_argument("--k-topics", type=int, default=4)
    syn.add_argument("--conversations", type=int, default=200)
    syn.add_argument("--seed", type=int, default=0)
    syn.add_argument("--stickiness", type=float, default=0.5)
    syn.add_argument("--out", required=True, help="output .jsonl path")
    syn.set_defaults(func=cmd_make_synthetic)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (pipeline.MissingPrerequisite, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return pipeline.EXIT_MISSING
    except (pipeline.ConfigError, CorpusError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return pipeline.EXIT_CONFIG
    except (DivergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return pipeline.EXIT_NUMERIC
    except pipeline.RunLocked as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
