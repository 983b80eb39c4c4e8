"""Command-line entry point: ``treeps {gen-corpus,rollout,train,export-tree}``.

Settings come from a TOML file with ``[env]``, ``[rollout]``, ``[train]`` and
``[policy]`` tables. Command-line flags override the file and ``TREEPS_SEED``
overrides both. Every command writes a ``manifest.json`` next to its outputs;
the outputs carry the manifest's config digest.

Exit status is 0 on success, 1 on configuration errors and 2 on runtime
failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import subprocess
import sys
import tempfile
from dataclasses import asdict, dataclass, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from . import __version__
from .credit import credit_tree
from .env import EnvConfig, SimRetriever, corpus_from_dict, dumps_corpus, generate_corpus, self_test
from .errors import ConfigError, TreePSError
from .experience import dumps_batches, enumerate_paths, sample_experience
from .export import dumps_tree, tree_to_dot, tree_to_json
from .policy import RemoteEndpointConfig, RemotePolicy, TabularPolicy
from .trainer import TrainConfig, run_training, with_outcome_advantages
from .tree import RolloutConfig, build_tree

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

MANIFEST_NAME = "manifest.json"
SECTIONS = ("env", "rollout", "train", "policy")
POLICY_KEYS = {"kind": "tabular", "path": None, "base_url": None, "timeout": 60.0, "max_tokens": 512}
_RUN_ONLY = {"seed"}  # keys owned by the top-level seed, not by a section
_SECTION_TYPES = {"env": EnvConfig, "rollout": RolloutConfig, "train": TrainConfig}


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- config -----------------------------------------------------------------

def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def load_config(path: Optional[str]) -> dict[str, dict]:
    """Read and shallow-validate a TOML config. Missing file or bad keys raise ConfigError."""
    raw: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"invalid TOML in {path}: {e}") from None
    unknown = set(raw) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = {s: dict(raw.get(s, {})) for s in SECTIONS}
    for s, cls in _SECTION_TYPES.items():
        bad = set(cfg[s]) - (_field_names(cls) - _RUN_ONLY)
        if bad:
            raise ConfigError(f"unknown keys in [{s}]: {sorted(bad)}")
    bad = set(cfg["policy"]) - set(POLICY_KEYS)
    if bad:
        raise ConfigError(f"unknown keys in [policy]: {sorted(bad)}")
    cfg["seed"] = raw.get("seed", 0)
    return cfg


def resolve_seed(cfg: Mapping, flag: Optional[int]) -> int:
    env = os.environ.get("TREEPS_SEED")
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"TREEPS_SEED must be an integer, got {env!r}") from None
    if flag is not None:
        return flag
    seed = cfg.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    return seed


def _build(cls, values: Mapping[str, Any]):
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def config_digest(resolved: Mapping) -> str:
    blob = json.dumps(resolved, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# -- manifest and writes ----------------------------------------------------

def version_string() -> str:
    """``git describe`` of the source checkout when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return when.strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class RunManifest:
    command: str
    config: Mapping
    config_digest: str
    seed: int
    started_at: str
    finished_at: str
    outputs: tuple[str, ...]
    version: str

    def to_json(self) -> str:
        d = asdict(self)
        d["outputs"] = list(self.outputs)
        return json.dumps(d, indent=1, sort_keys=True, default=list) + "\n"


def atomic_write(path: Path, text: str) -> None:
    """Write to a sibling temp file, then rename over the target."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _finish(command: str, resolved: Mapping, seed: int, started: str, outputs: Mapping[Path, str],
            manifest_dir: Path) -> None:
    for path, text in outputs.items():
        atomic_write(path, text)
    manifest = RunManifest(command, resolved, config_digest(resolved), seed, started, _timestamp(),
                           tuple(str(p) for p in outputs), version_string())
    atomic_write(manifest_dir / MANIFEST_NAME, manifest.to_json())


# -- environment and policy -------------------------------------------------

def _load_world(corpus_path: Optional[str], env_cfg: EnvConfig):
    if corpus_path is None:
        return generate_corpus(env_cfg)
    try:
        with open(corpus_path, encoding="utf-8") as fh:
            return corpus_from_dict(json.load(fh))
    except FileNotFoundError:
        raise ConfigError(f"corpus file not found: {corpus_path}") from None
    except (ValueError, KeyError, TypeError) as e:
        raise ConfigError(f"corpus file {corpus_path} is malformed: {e}") from None


def _make_policy(pcfg: Mapping, corpus, max_depth: int):
    kind = pcfg["kind"]
    if kind == "tabular":
        if pcfg["path"] is None:
            return TabularPolicy(corpus, max_depth)
        try:
            with open(pcfg["path"], encoding="utf-8") as fh:
                doc = json.load(fh)
            return TabularPolicy.from_dict(doc["policy"] if "policy" in doc else doc, corpus)
        except FileNotFoundError:
            raise ConfigError(f"policy file not found: {pcfg['path']}") from None
        except (ValueError, KeyError, TypeError) as e:
            raise ConfigError(f"policy file {pcfg['path']} is malformed: {e}") from None
    if kind == "remote":
        if not pcfg["base_url"]:
            raise ConfigError("[policy] kind = 'remote' needs base_url")
        return RemotePolicy(RemoteEndpointConfig(pcfg["base_url"], float(pcfg["timeout"]),
                                                 max_tokens=int(pcfg["max_tokens"])))
    raise ConfigError(f"unknown policy kind {kind!r}")


def _pick_question(questions, ref: str):
    for q in questions:
        if q.id == ref:
            return q
    try:
        idx = int(ref)
    except ValueError:
        raise ConfigError(f"no question with id {ref!r}") from None
    if not 0 <= idx < len(questions):
        raise ConfigError(f"question index {idx} out of range (corpus has {len(questions)})")
    return questions[idx]


def _overlay(section: dict, **flags) -> dict:
    out = dict(section)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


# -- commands ---------------------------------------------------------------

def cmd_gen_corpus(args, cfg) -> int:
    started = _timestamp()
    seed = resolve_seed(cfg, args.seed)
    env_vals = _overlay(cfg["env"], num_chains=args.chains, hop_count=args.hops,
                        distractors_per_chain=args.distractors)
    env_cfg = _build(EnvConfig, {**env_vals, "seed": seed})
    corpus, questions = generate_corpus(env_cfg)
    problems = self_test(corpus, questions, env_cfg.K, env_cfg.passage_token_cap)
    if problems:
        raise TreePSError("corpus self-test failed: " + "; ".join(problems))
    out = Path(args.out)
    resolved = {"command": "gen-corpus", "env": asdict(env_cfg), "seed": seed}
    _finish("gen-corpus", resolved, seed, started, {out: dumps_corpus(corpus, questions)}, out.parent)
    return 0


def cmd_rollout(args, cfg) -> int:
    started = _timestamp()
    seed = resolve_seed(cfg, args.seed)
    env_cfg = _build(EnvConfig, cfg["env"])
    rollout_vals = _overlay(cfg["rollout"], N=args.N, D=args.D, N_retain=args.N_retain,
                            pruning_mode=args.pruning_mode)
    rollout_cfg = _build(RolloutConfig, {**rollout_vals, "seed": seed})
    pcfg = _overlay({**POLICY_KEYS, **cfg["policy"]}, path=args.policy)
    corpus, questions = _load_world(args.corpus, env_cfg)
    question = _pick_question(questions, args.question_id)
    policy = _make_policy(pcfg, corpus, rollout_cfg.D)
    retriever = SimRetriever(corpus, rollout_cfg.K, env_cfg.passage_token_cap)

    resolved = {
        "command": "rollout", "env": asdict(env_cfg), "rollout": asdict(rollout_cfg), "policy": pcfg,
        "corpus": args.corpus, "question_id": question.id, "seed": seed,
        "advantage_mode": args.advantage_mode,
    }
    if isinstance(policy, TabularPolicy):
        resolved["policy_digest"] = policy.digest()
    digest = config_digest(resolved)

    tree = build_tree(question, policy, retriever, rollout_cfg)
    rewards, credits = credit_tree(tree)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    batch = sample_experience(enumerate_paths(tree), rollout_cfg.N, rng, credits=credits, rewards=rewards)
    if args.advantage_mode == "outcome_grpo":
        batch = with_outcome_advantages(batch)
    doc = tree_to_json(tree, credits, digest)

    out = Path(args.out_dir)
    outputs = {
        out / "tree.json": dumps_tree(doc),
        out / "tree.dot": tree_to_dot(doc, MANIFEST_NAME),
        out / "experience.jsonl": dumps_batches([batch]),
    }
    _finish("rollout", resolved, seed, started, outputs, out)
    return 0


def cmd_train(args, cfg) -> int:
    started = _timestamp()
    seed = resolve_seed(cfg, args.seed)
    env_cfg = _build(EnvConfig, cfg["env"])
    rollout_cfg = _build(RolloutConfig, _overlay(cfg["rollout"], N=args.N, D=args.D, N_retain=args.N_retain))
    train_vals = _overlay(cfg["train"], advantage_mode=args.advantage_mode, pruning_mode=args.pruning_mode,
                          iterations=args.iterations, learning_rate=args.learning_rate)
    train_cfg = _build(TrainConfig, {**train_vals, "seed": seed})
    pcfg = _overlay({**POLICY_KEYS, **cfg["policy"]}, path=args.policy)
    if pcfg["kind"] != "tabular":
        raise ConfigError("train supports only the tabular policy")
    corpus, questions = _load_world(args.corpus, env_cfg)
    policy = _make_policy(pcfg, corpus, rollout_cfg.D)

    resolved = {
        "command": "train", "env": asdict(env_cfg), "rollout": asdict(rollout_cfg),
        "train": asdict(train_cfg), "policy": pcfg, "corpus": args.corpus, "seed": seed,
        "policy_digest": policy.digest(),
    }
    digest = config_digest(resolved)
    result = run_training((corpus, questions), policy, rollout_cfg, train_cfg)
    policy_doc = {"config_digest": digest, "manifest": MANIFEST_NAME, "policy": result.policy.to_dict()}

    out = Path(args.out_dir)
    outputs = {
        out / "curve.csv": result.to_csv(),
        out / "policy.json": json.dumps(policy_doc, indent=1, sort_keys=True) + "\n",
    }
    _finish("train", resolved, seed, started, outputs, out)
    return 0


def cmd_export_tree(args, cfg) -> int:
    started = _timestamp()
    try:
        with open(args.tree, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"tree file not found: {args.tree}") from None
    except ValueError as e:
        raise ConfigError(f"tree file {args.tree} is not valid JSON: {e}") from None
    if not isinstance(doc, dict) or any(k not in doc for k in ("question_id", "config_digest", "nodes", "layers")):
        raise ConfigError(f"{args.tree} is not a tree document")
    out = Path(args.out) if args.out else Path(args.tree).with_suffix(".dot")
    seed = resolve_seed(cfg, None)
    resolved = {"command": "export-tree", "tree": args.tree, "tree_config_digest": doc["config_digest"]}
    _finish("export-tree", resolved, seed, started, {out: tree_to_dot(doc, MANIFEST_NAME)}, out.parent)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="treeps", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"treeps {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="TOML config file")
        sp.add_argument("--seed", type=int)

    g = sub.add_parser("gen-corpus", help="generate a synthetic multi-hop corpus")
    common(g)
    g.add_argument("--chains", type=int)
    g.add_argument("--hops", type=int)
    g.add_argument("--distractors", type=int)
    g.add_argument("--out", default="corpus.json")
    g.set_defaults(func=cmd_gen_corpus)

    r = sub.add_parser("rollout", help="build one tree and write tree JSON, DOT and experience JSONL")
    common(r)
    r.add_argument("--corpus", help="corpus JSON (generated from [env] when omitted)")
    r.add_argument("--question-id", default="0", help="question id or index")
    r.add_argument("--policy", help="tabular policy JSON")
    r.add_argument("--N", type=int)
    r.add_argument("--D", type=int)
    r.add_argument("--N-retain", dest="N_retain", type=int)
    r.add_argument("--pruning-mode", choices=("similarity", "random"))
    r.add_argument("--advantage-mode", choices=("process", "outcome_grpo"), default="process")
    r.add_argument("--out-dir", default="rollout")
    r.set_defaults(func=cmd_rollout)

    t = sub.add_parser("train", help="train the tabular policy and write the learning curve")
    common(t)
    t.add_argument("--corpus")
    t.add_argument("--policy", help="initial tabular policy JSON")
    t.add_argument("--N", type=int)
    t.add_argument("--D", type=int)
    t.add_argument("--N-retain", dest="N_retain", type=int)
    t.add_argument("--advantage-mode", choices=("process", "outcome_grpo"))
    t.add_argument("--pruning-mode", choices=("similarity", "random"))
    t.add_argument("--iterations", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--out-dir", default="train")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("export-tree", help="render a tree JSON document as DOT")
    e.add_argument("tree")
    e.add_argument("--out")
    e.add_argument("--config", help=argparse.SUPPRESS)
    e.set_defaults(func=cmd_export_tree)
    return p


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except ConfigError as e:
        print(f"treeps: config error: {e}", file=sys.stderr)
        return 1
    except (TreePSError, OSError, ValueError) as e:
        print(f"treeps: error: {e}", file=sys.stderr)
        return 2


def main(argv: Optional[Sequence[str]] = None) -> int:
    return run_command(argv)


if __name__ == "__main__":
    sys.exit(main())
