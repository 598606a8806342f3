"""Staged pipeline over a run directory with strict config, manifests and a writer lock."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import clustering, contrastive, corpus as corpus_mod, encoder as encoder_mod, generation, metrics, structure
from .synthetic import make_synthetic, write_synthetic

logger = logging.getLogger(__name__)

STAGES = (
    "ingest", "train-encoder", "embed", "cluster", "train-policy",
    "build-graph", "train-generator", "generate", "evaluate", "export-graph",
)
# export-graph renders an artifact that build-graph already produced; it is run on demand
ALL_STAGES = STAGES[:-1]

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class MissingPrerequisite(RuntimeError):
    def __init__(self, artifact: str, stage: str):
        super().__init__(f"missing artifact {artifact!r}; run the {stage!r} stage first")
        self.artifact = artifact
        self.stage = stage


class RunLocked(RuntimeError):
    pass


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "run_dir": None,
    "corpus": {
        "path": None,
        "format": "jsonl",
        "synthetic": None,
        "lexicon": None,
        "min_freq": 2,
        "max_len": 32,
        "test_fraction": 0.1,
        "max_eval_examples": 200,
    },
    "encoder": {
        "n": 64,
        "use_attention": True,
        "dropout_rate": 0.1,
        "max_positions": 128,
        "projection_init": "uniform",
    },
    "contrastive": {
        "tau": 0.05,
        "lambda1": 0.2,
        "lambda1_mode": "literal",
        "epochs": 20,
        "batch_size": 32,
        "learning_rate": 1e-3,
        "ablation": "none",
        "strategies": [
            {"kind": "dropout", "rate": 0.0},
            {"kind": "context_insert", "rate": 0.15},
            {"kind": "random_replace", "rate": 0.15},
        ],
    },
    "clustering": {"k": 60, "max_iter": 200, "tol": 1e-6, "n_init": 10},
    "policy": {
        "hidden": 128,
        "learning_rate": 1e-3,
        "epochs": 200,
        "batch_size": 64,
        "sigma2": 1.0,
        "train_critic": True,
        "lr_schedule": "cosine",
        "edge_estimator": "mixture",
    },
    "generation": {
        "lambda2": 1.2,
        "max_context_turns": 4,
        "max_context_tokens": 128,
        "max_response_len": 32,
        "decoding": "greedy",
        "beam_width": 4,
        "top_k": 10,
        "top_p": 0.9,
        "temperature": 1.0,
        "teacher_topic": "policy_predicted",
        "n_layers": 2,
        "n_heads": 2,
        "tie_embeddings": True,
        "epochs": 30,
        "batch_size": 32,
        "learning_rate": 3e-3,
    },
    "eval": {"phis": list(metrics.DEFAULT_PHIS)},
    "export": {"top_m": 3},
}

SYNTHETIC_DEFAULTS = {"k_topics": 4, "conversations": 200, "seed": 0, "stickiness": 0.5}

# sections whose value may be null or a free-form nested dict
_OPEN_SECTIONS = {("corpus", "synthetic")}


def _merge(defaults: Any, user: Any, path: str) -> Any:
    if isinstance(defaults, dict):
        if not isinstance(user, dict):
            raise ConfigError(f"{path or '<root>'}: expected an object")
        unknown = sorted(set(user) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(f'{path}.{k}'.lstrip('.') for k in unknown)}")
        out = copy.deepcopy(defaults)
        for key, value in user.items():
            sub = f"{path}.{key}".lstrip(".")
            if tuple(sub.split(".")) in _OPEN_SECTIONS:
                out[key] = _merge(SYNTHETIC_DEFAULTS, value, sub) if value is not None else None
            elif defaults[key] is None:
                out[key] = value
            else:
                out[key] = _merge(defaults[key], value, sub)
        return out
    if isinstance(defaults, bool):
        if not isinstance(user, bool):
            raise ConfigError(f"{path}: expected a boolean, got {user!r}")
        return user
    if isinstance(defaults, (int, float)) and not isinstance(defaults, bool):
        if isinstance(user, bool) or not isinstance(user, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {user!r}")
        if isinstance(defaults, float):
            return float(user)
        if not float(user).is_integer():
            raise ConfigError(f"{path}: expected an integer, got {user!r}")
        return int(user)
    if isinstance(defaults, str):
        if not isinstance(user, str):
            raise ConfigError(f"{path}: expected a string, got {user!r}")
        return user
    if isinstance(defaults, list):
        if not isinstance(user, list):
            raise ConfigError(f"{path}: expected a list, got {user!r}")
        return user
    return user


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Strictly merge a JSON config file (and CLI overrides) over the documented defaults."""
    user: dict = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    cfg = _merge(DEFAULTS, user, "")
    for key, value in (overrides or {}).items():
        cfg = _merge(DEFAULTS, _set_path(copy.deepcopy(cfg), key, value), "")
    _validate(cfg)
    return cfg


def _set_path(cfg: dict, dotted: str, value: Any) -> dict:
    node = cfg
    keys = dotted.split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value
    return cfg


def _validate(cfg: dict) -> None:
    try:
        encoder_cfg(cfg, 1)
        contrastive_cfg(cfg)
        policy_cfg(cfg)
        generation_cfg(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg["clustering"]["k"] < 2:
        raise ConfigError("clustering.k must be >= 2")
    if cfg["policy"]["edge_estimator"] not in structure.EDGE_ESTIMATORS:
        raise ConfigError(f"policy.edge_estimator must be one of {structure.EDGE_ESTIMATORS}")
    if cfg["corpus"]["format"] not in ("jsonl", "dailydialog"):
        raise ConfigError("corpus.format must be 'jsonl' or 'dailydialog'")
    if not 0 <= cfg["corpus"]["test_fraction"] < 1:
        raise ConfigError("corpus.test_fraction must be in [0, 1)")
    if cfg["export"]["top_m"] < 1:
        raise ConfigError("export.top_m must be >= 1")


def stage_seed(global_seed: int, stage: str) -> int:
    digest = hashlib.sha256(f"{global_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


def config_hash(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def encoder_cfg(cfg: dict, vocab_size: int) -> encoder_mod.EncoderConfig:
    return encoder_mod.EncoderConfig(vocab_size=vocab_size, seed=stage_seed(cfg["seed"], "encoder-init"), **cfg["encoder"])


def contrastive_cfg(cfg: dict) -> contrastive.ContrastiveConfig:
    return contrastive.ContrastiveConfig(seed=stage_seed(cfg["seed"], "train-encoder"), **cfg["contrastive"])


def policy_cfg(cfg: dict) -> structure.PolicyConfig:
    p = {k: v for k, v in cfg["policy"].items() if k != "edge_estimator"}
    return structure.PolicyConfig(seed=stage_seed(cfg["seed"], "train-policy"), **p)


def generation_cfg(cfg: dict) -> generation.GenerationConfig:
    return generation.GenerationConfig(seed=stage_seed(cfg["seed"], "train-generator"), **cfg["generation"])


@dataclass
class Artifacts:
    """Paths of every artifact inside a run directory."""
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def train(self): return self.root / "corpus" / "train.jsonl"
    @property
    def test(self): return self.root / "corpus" / "test.jsonl"
    @property
    def vocab(self): return self.root / "corpus" / "vocab.json"
    @property
    def encoder(self): return self.root / "encoder" / "encoder.json"
    @property
    def encoder_history(self): return self.root / "encoder" / "history.json"
    @property
    def embeddings(self): return self.root / "embeddings" / "embeddings.npy"
    @property
    def embedding_keys(self): return self.root / "embeddings" / "keys.json"
    @property
    def clusters(self): return self.root / "clusters" / "clusters.json"
    @property
    def policy(self): return self.root / "policy" / "policy.json"
    @property
    def graph(self): return self.root / "graph" / "graph.json"
    @property
    def graph_dot(self): return self.root / "graph" / "graph.dot"
    @property
    def generator(self): return self.root / "generator" / "generator.json"
    @property
    def generator_history(self): return self.root / "generator" / "history.json"
    @property
    def generations(self): return self.root / "generations" / "generations.jsonl"
    @property
    def report(self): return self.root / "reports" / "report.json"
    @property
    def report_txt(self): return self.root / "reports" / "report.txt"
    @property
    def manifest(self): return self.root / "manifest.jsonl"
    @property
    def lock(self): return self.root / ".lock"


PRODUCERS = {
    "train": "ingest", "test": "ingest", "vocab": "ingest",
    "encoder": "train-encoder", "embeddings": "embed", "embedding_keys": "embed",
    "clusters": "cluster", "policy": "train-policy", "graph": "build-graph",
    "generator": "train-generator", "generations": "generate", "report": "evaluate",
}


@contextmanager
def run_lock(art: Artifacts):
    art.root.mkdir(parents=True, exist_ok=True)
    try:
        fd = os.open(art.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise RunLocked(f"run directory {art.root} is locked by another writer ({art.lock})") from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        yield
    finally:
        os.close(fd)
        art.lock.unlink(missing_ok=True)


def _json_dump(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


class Pipeline:
    def __init__(self, cfg: dict, run_dir: str | Path):
        self.cfg = cfg
        self.art = Artifacts(run_dir)
        self._cache: dict[str, Any] = {}

    # loading helpers

    def _need(self, name: str) -> Path:
        path = getattr(self.art, name)
        if not path.exists():
            raise MissingPrerequisite(str(path.relative_to(self.art.root)), PRODUCERS[name])
        return path

    def vocab(self) -> corpus_mod.Vocab:
        return corpus_mod.Vocab.from_json(json.loads(self._need("vocab").read_text()))

    def split(self, name: str) -> corpus_mod.Corpus:
        c = corpus_mod.parse_jsonl(self._need(name))
        return c.attach_vocab(self.vocab(), self.cfg["corpus"]["max_len"])

    def encoder(self) -> encoder_mod.EncoderModel:
        return encoder_mod.load_checkpoint(self._need("encoder"), self.vocab().hash)

    def embeddings(self) -> np.ndarray:
        return np.load(self._need("embeddings"))

    def clusters(self) -> clustering.TopicClusters:
        return clustering.TopicClusters.load(self._need("clusters"))

    def policy(self) -> structure.Policy:
        return structure.Policy.load(self._need("policy"))

    def controller(self) -> generation.TopicController:
        return generation.TopicController(self.encoder(), self.clusters(), self.policy())

    # stages

    def stage_ingest(self, seed: int) -> dict:
        c = self.cfg["corpus"]
        source: dict[str, Any]
        if c["synthetic"] is not None:
            syn = c["synthetic"]
            data = make_synthetic(syn["k_topics"], syn["conversations"], syn["seed"], stickiness=syn["stickiness"])
            paths = write_synthetic(data, self.art.root / "corpus" / "synthetic.jsonl")
            full = data.corpus
            source = {"synthetic": syn, "ground_truth": {k: str(v.relative_to(self.art.root)) for k, v in paths.items()}}
        elif c["path"] is not None:
            parse = corpus_mod.parse_jsonl if c["format"] == "jsonl" else corpus_mod.parse_dailydialog
            try:
                full = parse(c["path"])
            except FileNotFoundError as exc:
                raise ConfigError(f"corpus.path not found: {c['path']}") from exc
            source = {"path": str(c["path"]), "format": c["format"], "skipped_short": full.skipped_short,
                      "rejected_empty": full.rejected_empty}
        else:
            raise ConfigError("set corpus.path or corpus.synthetic")
        if len(full) == 0:
            raise ConfigError("corpus has no usable conversations")
        rng = np.random.default_rng(seed)
        n_test = int(round(len(full) * c["test_fraction"]))
        test_idx = set(rng.permutation(len(full))[:n_test].tolist())
        train = corpus_mod.Corpus([cv for i, cv in enumerate(full.conversations) if i not in test_idx])
        test = corpus_mod.Corpus([cv for i, cv in enumerate(full.conversations) if i in test_idx])
        vocab = corpus_mod.Vocab.build(train, c["min_freq"])
        self.art.train.parent.mkdir(parents=True, exist_ok=True)
        train.to_jsonl(self.art.train)
        test.to_jsonl(self.art.test)
        _json_dump(self.art.vocab, vocab.to_json())
        return {"source": source, "conversations": {"train": len(train), "test": len(test)},
                "utterances": train.num_utterances, "vocab_size": len(vocab)}

    def stage_train_encoder(self, seed: int) -> dict:
        vocab = self.vocab()
        train = self.split("train")
        lexicon = corpus_mod.load_lexicon(self.cfg["corpus"]["lexicon"]) if self.cfg["corpus"]["lexicon"] else None
        ecfg = encoder_cfg(self.cfg, len(vocab))
        ccfg = contrastive_cfg(self.cfg)
        model, history = contrastive.train_encoder(train, vocab, ecfg, ccfg, lexicon)
        self.art.encoder.parent.mkdir(parents=True, exist_ok=True)
        encoder_mod.save_checkpoint(model, self.art.encoder, vocab.hash)
        _json_dump(self.art.encoder_history, {"epochs": [e.to_json() for e in history.epochs], "steps": history.steps})
        return {"contrastive": ccfg.to_json(), "encoder": asdict(ecfg), "history": history.to_json()}

    def stage_embed(self, seed: int) -> dict:
        train = self.split("train")
        emb = structure.corpus_embeddings(train, self.encoder())
        self.art.embeddings.parent.mkdir(parents=True, exist_ok=True)
        np.save(self.art.embeddings, emb)
        _json_dump(self.art.embedding_keys, [[u.conv_id, u.turn_index] for u in train.utterances()])
        return {"shape": list(emb.shape)}

    def stage_cluster(self, seed: int) -> dict:
        emb = self.embeddings()
        keys = [tuple(k) for k in json.loads(self._need("embedding_keys").read_text())]
        cc = self.cfg["clustering"]
        clusters = clustering.spherical_kmeans(emb, cc["k"], seed, cc["max_iter"], cc["tol"], cc["n_init"])
        scores = {
            "chi": clustering.calinski_harabasz(emb, clusters.assignments),
            "dbi": clustering.davies_bouldin(emb, clusters.assignments),
        }
        self.art.clusters.parent.mkdir(parents=True, exist_ok=True)
        clusters.save(self.art.clusters, keys, scores)
        return {"k": cc["k"], "n_init": cc["n_init"], "inertia": clusters.inertia, "n_iter": clusters.n_iter, **scores}

    def _trajectories(self) -> structure.TrajectorySet:
        train = self.split("train")
        clusters = self.clusters()
        return structure.trajectories_from_labels(
            self.embeddings(), clusters.assignments, [len(c) for c in train.conversations], clusters)

    def stage_train_policy(self, seed: int) -> dict:
        traj = self._trajectories()
        pcfg = policy_cfg(self.cfg)
        policy = structure.train_policy(traj, pcfg)
        self.art.policy.parent.mkdir(parents=True, exist_ok=True)
        policy.save(self.art.policy)
        return {"pairs": len(traj), "final_mse": policy.final_mse, "policy": asdict(pcfg)}

    def stage_build_graph(self, seed: int) -> dict:
        train = self.split("train")
        clusters = self.clusters()
        traj = self._trajectories()
        estimator = self.cfg["policy"]["edge_estimator"]
        matrix, empty = structure.graph_from_states(traj.states, traj.source_clusters, self.policy(), clusters, estimator)
        texts = [u.text for u in train.utterances()]
        graph = structure.StructureGraph(matrix, f"policy:{estimator}",
                                         structure._vertex_meta(clusters.k, clusters.assignments, texts, empty))
        self.art.graph.parent.mkdir(parents=True, exist_ok=True)
        graph.save(self.art.graph)
        emp = structure.empirical_transitions([len(c) for c in train.conversations], clusters.assignments, clusters.k)
        tv = 0.5 * np.abs(emp.matrix - matrix).sum(axis=1)
        return {"estimator": estimator, "uniform_rows": empty, "mean_tv_vs_empirical": float(tv.mean())}

    def stage_train_generator(self, seed: int) -> dict:
        vocab = self.vocab()
        train = self.split("train")
        gcfg = generation_cfg(self.cfg)
        controller = self.controller() if gcfg.lambda2 > 0 else None
        n = self.cfg["encoder"]["n"]
        model, history = generation.train_generator(train, vocab, controller, gcfg, n=n)
        self.art.generator.parent.mkdir(parents=True, exist_ok=True)
        model.save(self.art.generator, vocab.hash)
        _json_dump(self.art.generator_history, {"nll": history.nll, "kl": history.kl, "steps": history.steps,
                                                "pairs": history.pairs})
        return {"generation": asdict(gcfg), "history": history.to_json()}

    def stage_generate(self, seed: int) -> dict:
        vocab = self.vocab()
        test = self.split("test")
        if len(test) == 0:
            test = self.split("train")
        gcfg = generation_cfg(self.cfg)
        model = generation.GeneratorModel.load(self._need("generator"), vocab.hash)
        controller = self.controller()
        examples = generation.make_examples(test, vocab, gcfg)[: self.cfg["corpus"]["max_eval_examples"]]
        decode_cfg = {k: getattr(gcfg, k) for k in ("decoding", "beam_width", "top_k", "top_p", "temperature",
                                                    "max_response_len")}
        self.art.generations.parent.mkdir(parents=True, exist_ok=True)
        with open(self.art.generations, "w", encoding="utf-8") as fh:
            for i, ex in enumerate(examples):
                hyp = generation.decode(ex.context, model, gcfg, seed=seed + i, bos_id=vocab.bos_id, eos_id=vocab.eos_id)
                row = {
                    "conv_id": ex.conv_id,
                    "turn_index": ex.turn_index,
                    "context": ex.context_text,
                    "reference": ex.reference_text,
                    "hypothesis": vocab.decode(hyp),
                    "decode_config": decode_cfg,
                    "predicted_cluster": controller.predicted_cluster(ex.last_utterance),
                    "reference_cluster": controller.reference_cluster(ex.reference),
                }
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        return {"examples": len(examples), "decode_config": decode_cfg}

    def stage_evaluate(self, seed: int) -> dict:
        report = metrics.evaluate_run(self._need("generations"), self.vocab(), self.encoder(), self.clusters(),
                                      self.cfg["eval"]["phis"], embeddings=self.embeddings())
        _json_dump(self.art.report, report.to_json())
        self.art.report_txt.write_text(report.table())
        return {"htha": report.htha, "bleu1": report.bleu1, "rouge_l": report.rouge_l}

    def stage_export_graph(self, seed: int) -> dict:
        graph = structure.StructureGraph.load(self._need("graph"))
        self.art.graph_dot.write_text(structure.export_graph(graph, "DOT", self.cfg["export"]["top_m"]))
        return {"top_m": self.cfg["export"]["top_m"]}

    # orchestration

    def _inputs(self) -> dict[str, str]:
        out = {}
        for name in PRODUCERS:
            path = getattr(self.art, name)
            if path.exists():
                out[str(path.relative_to(self.art.root))] = file_hash(path)
        return out

    def run_stage(self, stage: str) -> dict:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)} or all")
        seed = stage_seed(self.cfg["seed"], stage)
        inputs = self._inputs()
        start = time.perf_counter()
        info = getattr(self, "stage_" + stage.replace("-", "_"))(seed)
        entry = {
            "stage": stage,
            "config_hash": config_hash(self.cfg),
            "input_hashes": inputs,
            "seed": seed,
            "wall_time": time.perf_counter() - start,
            "info": info,
        }
        with open(self.art.manifest, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
        logger.info("stage %s done in %.1fs", stage, entry["wall_time"])
        return entry

    def run(self, stage: str) -> list[dict]:
        with run_lock(self.art):
            # run_dir is left as configured so copies of a run stay byte-identical
            _json_dump(self.art.root / "config.json", self.cfg)
            stages = ALL_STAGES if stage == "all" else (stage,)
            return [self.run_stage(s) for s in stages]


def artifact_hashes(run_dir: str | Path) -> dict[str, str]:
    """sha256 of every artifact file, excluding the manifest and lock (they carry wall times)."""
    root = Path(run_dir)
    skip = {"manifest.jsonl", ".lock"}
    return {
        str(p.relative_to(root)): file_hash(p)
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name not in skip and "chat" not in p.relative_to(root).parts
    }


def run_pipeline(cfg: dict, run_dir: str | Path, stage: str = "all") -> list[dict]:
    return Pipeline(cfg, run_dir).run(stage)
