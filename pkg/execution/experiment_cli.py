"""
Experiment CLI
==============
Front-end for the DEVI / DQN experiments.

    python execution/experiment_cli.py train       --config exp.json [--out DIR] [--parallel N] [--seed-override K]
    python execution/experiment_cli.py transfer    --config exp.json --checkpoints runs/*.ckpt
    python execution/experiment_cli.py reevaluate  --config exp.json --snapshots runs/store_*.store
    python execution/experiment_cli.py oracle-dump --config exp.json
    python execution/experiment_cli.py gradcheck   --config exp.json
    python execution/experiment_cli.py plot        runs/metrics.csv [--out curves.svg]

Exit codes: 0 success, 2 configuration error, 3 runtime failure.

Every cmd_* function returns a result dict ({"success": True, ...} or
{"error": "...", "exit_code": n}) instead of raising, and writes provenance.json
next to its outputs.
"""

import argparse
import glob
import json
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict
from typing import Optional

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from devi_model import EpisodicStore, PlannerConfig, multi_horizon_loss  # noqa: E402
from diffkit import (  # noqa: E402
    BoundEncoder, EncoderParams, Tape, build_encoder, load_checkpoint, params_digest, save_checkpoint,
)
from dqn_baseline import BoundDqn, DqnParams, dqn_td_loss, init_dqn  # noqa: E402
from experiment_config import (  # noqa: E402
    ConfigError, ExperimentConfig, ensure_output_dir, env_glyph_dir, env_parallel, load_config,
)
from graph_world import (  # noqa: E402
    GlyphLibrary, GraphWorldEnv, Prototype, TaskSpec, default_library, load_pgm_directory,
    make_task, parse_prototype,
)
from oracle import dump_solution_csv, exact_value_iteration, gradient_check  # noqa: E402
from replay_buffer import Batch, ReplayBuffer, collect, uniform_random_policy  # noqa: E402
from svg_plot import plot_metrics  # noqa: E402
from train_loop import (  # noqa: E402
    MetricsRow, MetricsSink, TaskSampler, train_devi, train_dqn, relearn_cost,
    write_horizon_csv, write_metrics_csv,
)
from transfer_eval import EvaluationProtocol, transfer_eval  # noqa: E402

__version__ = "1.0.0"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

TRANSFER_COLUMNS = ["in_distribution", "gradient_updates", "checkpoint_sha256", "relearn_minibatches",
                    "store_snapshot"]
GRADCHECK_STORE_PER_ACTION = 10
GRADCHECK_BATCH = 8
GRADCHECK_SWEEPS = 3


# ── Shared helpers ──

def _library(config: ExperimentConfig) -> GlyphLibrary:
    glyph_dir = env_glyph_dir()
    if glyph_dir:
        return load_pgm_directory(glyph_dir, noise_rate=config.noise_rate)
    return default_library(config.noise_rate)


def _seeds(config: ExperimentConfig, seed_override: Optional[int]) -> list:
    return [seed_override] if seed_override is not None else list(config.seeds)


def _write_provenance(out_dir: str, command: str, config: ExperimentConfig, seeds: list,
                      outputs: list, extra: Optional[dict] = None) -> str:
    record = {
        "command": command,
        "version": __version__,
        "config": config.to_dict(),
        "seeds": seeds,
        "glyph_source": env_glyph_dir() or "procedural",
        "outputs": sorted(os.path.relpath(p, out_dir) for p in outputs),
    }
    record.update(extra or {})
    path = os.path.join(out_dir, "provenance.json")
    with open(path, "w") as f:
        json.dump(record, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _fan_out(fn, items: list, parallel: int, tag: str) -> dict:
    """Run fn(item) for every item; results keyed by item. Raises after all finish if any failed."""
    results, failures = {}, {}
    if parallel <= 1:
        for item in items:
            results[item] = fn(item)
        return results
    with ThreadPoolExecutor(max_workers=parallel) as executor:
        future_to_item = {executor.submit(fn, item): item for item in items}
        for future in as_completed(future_to_item):
            item = future_to_item[future]
            try:
                results[item] = future.result()
            except Exception as e:
                traceback.print_exc()
                print(f"[{tag}] Worker for {item} failed: {e}")
                failures[item] = str(e)
    if failures:
        raise RuntimeError(f"{len(failures)} worker(s) failed: {failures}")
    return results


def _run_command(name: str, body) -> dict:
    try:
        return body()
    except ConfigError as e:
        print(f"[Config] {e}")
        return {"error": str(e), "key": e.key, "exit_code": EXIT_CONFIG}
    except Exception as e:
        traceback.print_exc()
        print(f"[{name}] FAILED: {e}")
        return {"error": str(e), "exit_code": EXIT_RUNTIME}


# ── train ──

def _train_one(config: ExperimentConfig, seed: int, library: GlyphLibrary, out_dir: str,
               sink: MetricsSink) -> dict:
    schedule = config.schedule(seed)
    run_id = f"{config.model}-seed{seed}"
    metadata = {
        "kind": config.model,
        "descriptor": config.encoder,
        "seed": seed,
        "version": __version__,
        "train_prototypes": list(config.train_prototypes),
        "minibatches": config.total_minibatches,
    }
    if config.model == "devi":
        sampler = TaskSampler(config.train_prototypes, seed, "train", library, config.tree_depth)
        result = train_devi(sampler, schedule, sink=sink, run_id=run_id)
        arrays = result.params.arrays
        write_horizon_csv(os.path.join(out_dir, f"horizons_{run_id}.csv"), run_id, result.horizon_errors)
    else:
        task = make_task(config.train_prototypes[0], seed, "train", library, config.tree_depth)
        result = train_dqn(task, schedule, sink=sink, run_id=run_id, library=library)
        arrays = result.params.arrays()
        metadata["task"] = task.to_json()
        metadata["target_syncs"] = result.target_syncs

    metadata["sha256"] = params_digest(arrays)
    metadata["gradient_samples"] = result.gradient_samples
    metadata["env_steps"] = result.env_steps
    checkpoint = os.path.join(out_dir, f"{run_id}.ckpt")
    save_checkpoint(checkpoint, arrays, metadata)
    metrics = os.path.join(out_dir, f"metrics_{run_id}.csv")
    write_metrics_csv(metrics, result.rows)
    print(f"[Train] {run_id}: checkpoint {checkpoint} (sha256 {metadata['sha256'][:12]})")
    return {"seed": seed, "run_id": run_id, "checkpoint": checkpoint, "metrics": metrics,
            "sha256": metadata["sha256"]}


def cmd_train(config: ExperimentConfig, out_dir: Optional[str] = None, parallel: int = 1,
              seed_override: Optional[int] = None) -> dict:
    """One checkpoint and one metrics CSV per seed, plus the combined metrics.csv."""
    def body():
        out = ensure_output_dir(out_dir or config.output_dir)
        seeds = _seeds(config, seed_override)
        library = _library(config)
        sink = MetricsSink()
        runs = _fan_out(lambda seed: _train_one(config, seed, library, out, sink), seeds, parallel, "Train")
        ordered = [runs[s] for s in seeds]
        order = {run["run_id"]: i for i, run in enumerate(ordered)}
        rows = sorted(sink.rows(), key=lambda r: (order[r.run_id], r.step))
        combined = os.path.join(out, "metrics.csv")
        write_metrics_csv(combined, rows)
        outputs = [combined] + [r["checkpoint"] for r in ordered] + [r["metrics"] for r in ordered]
        provenance = _write_provenance(out, "train", config, seeds, outputs)
        return {"success": True, "exit_code": EXIT_OK, "runs": ordered, "metrics": combined,
                "checkpoints": [r["checkpoint"] for r in ordered], "provenance": provenance}
    return _run_command("Train", body)


# ── transfer ──

def _load_model(path: str):
    if not os.path.exists(path):
        raise ConfigError("checkpoints", f"missing checkpoint {path}")
    tensors, metadata = load_checkpoint(path)
    kind = metadata.get("kind")
    if kind == "devi":
        params = EncoderParams(metadata["descriptor"], tensors)
    elif kind == "dqn":
        params = DqnParams.from_arrays(metadata["descriptor"], tensors)
    else:
        raise ValueError(f"{path}: unknown checkpoint kind {kind!r}")
    digest = params_digest(tensors)
    if metadata.get("sha256") and metadata["sha256"] != digest:
        raise RuntimeError(f"{path}: parameter digest does not match the recorded checkpoint hash")
    return kind, params, metadata, digest


def transfer_task_seed(model_seed: int, attempt: int, prototype: Prototype) -> int:
    ss = np.random.SeedSequence([int(model_seed), int(attempt), list(Prototype).index(prototype), 7])
    return int(ss.generate_state(1)[0] & 0x7FFFFFFF)


def _check_held_out(task: TaskSpec, library: GlyphLibrary) -> None:
    leaked = set(task.class_assignment) & set(library.train_classes)
    if leaked:
        raise RuntimeError(f"Held-out task {task.prototype.value} seed {task.seed} uses "
                           f"{len(leaked)} training glyph classes; aborting transfer")


def _attempt_rng(seed: int, attempt: int, prototype: Prototype) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(attempt),
                                                         list(Prototype).index(prototype)]))


def _snapshot_metadata(path: str, digest: str, seed: int, attempt: int, task: TaskSpec,
                       protocol: EvaluationProtocol, config: ExperimentConfig, result) -> dict:
    return {
        "kind": "store",
        "version": __version__,
        "checkpoint": os.path.abspath(path),
        "checkpoint_sha256": digest,
        "seed": seed,
        "attempt": attempt,
        "prototype": task.prototype.value,
        "task": task.to_json(),
        "noise_rate": config.noise_rate,
        "protocol": asdict(protocol),
        "population_steps": result.population_steps,
    }


def _transfer_one(config: ExperimentConfig, path: str, library: GlyphLibrary, out_dir: str) -> list:
    kind, params, metadata, digest = _load_model(path)
    seed = int(metadata.get("seed", 0))
    trained_on = {parse_prototype(p) for p in metadata.get("train_prototypes", [])}
    protocol = config.protocol()
    rows = []
    for proto_name in config.transfer_prototypes:
        proto = parse_prototype(proto_name)
        for attempt in range(config.transfer_attempts):
            task = make_task(proto, transfer_task_seed(seed, attempt, proto), config.transfer_split,
                             library, config.tree_depth)
            if config.transfer_split == "test":
                _check_held_out(task, library)
            result = transfer_eval(params, task, protocol, _attempt_rng(seed, attempt, proto), library)
            if result.digest_after != digest:
                raise RuntimeError(f"{path}: parameters changed during transfer evaluation")

            snapshot = ""
            if result.store is not None:
                snapshot = os.path.join(out_dir, f"store_{kind}-seed{seed}_{proto.value}_{attempt}.store")
                save_checkpoint(snapshot, result.store.to_tensors(),
                                _snapshot_metadata(path, digest, seed, attempt, task, protocol, config, result))

            relearn = ""
            if kind == "dqn" and config.relearn:
                schedule = config.schedule(seed)
                transferred = relearn_cost(task, schedule, params=params, library=library)
                fresh = relearn_cost(task, schedule, params=None, library=library)
                relearn = "" if transferred is None else transferred
                rows.append((MetricsRow(f"{kind}-seed{seed}-{proto.value}", "relearn_fresh", attempt,
                                        proto.value, task.seed),
                             [False, 0, digest, "" if fresh is None else fresh, ""]))

            in_distribution = config.transfer_split == "train" and proto in trained_on
            row = MetricsRow(f"{kind}-seed{seed}-{proto.value}", "transfer", attempt, proto.value, task.seed,
                             return_mean=result.stats.mean, return_std=result.stats.std,
                             oracle_norm=result.stats.oracle_norm, env_steps=result.stats.env_steps)
            rows.append((row, [in_distribution, result.gradient_updates, digest, relearn,
                               os.path.basename(snapshot)]))
    return rows


def _aggregate_rows(rows: list) -> list:
    """Mean / std across attempts and models, per (model kind, prototype)."""
    groups = {}
    for row, extra in rows:
        if row.phase != "transfer":
            continue
        kind = row.run_id.split("-")[0]
        groups.setdefault((kind, row.task_prototype), []).append((row, extra))
    out = []
    for (kind, proto), members in sorted(groups.items()):
        means = np.array([r.return_mean for r, _ in members])
        norms = np.array([r.oracle_norm for r, _ in members])
        relearn = [e[3] for _, e in members if e[3] != ""]
        summary = MetricsRow(f"{kind}-aggregate-{proto}", "transfer_summary", len(members), proto, -1,
                             return_mean=float(np.mean(means)), return_std=float(np.std(means)),
                             oracle_norm=float(np.mean(norms)),
                             env_steps=int(sum(r.env_steps for r, _ in members)))
        out.append((summary, [members[0][1][0], 0, "", float(np.mean(relearn)) if relearn else "", ""]))
    return out


def cmd_transfer(config: ExperimentConfig, checkpoints: list, out_dir: Optional[str] = None,
                 parallel: int = 1) -> dict:
    """Frozen-weight evaluation of every checkpoint on `transfer_attempts` tasks per prototype.

    Each DEVI attempt also leaves its evaluation store next to transfer.csv as a
    `.store` snapshot, so the row can be re-evaluated later with `reevaluate`.
    """
    def body():
        if not checkpoints:
            raise ConfigError("checkpoints", "no checkpoints given")
        for path in checkpoints:
            if not os.path.exists(path):
                raise ConfigError("checkpoints", f"missing checkpoint {path}")
        out = ensure_output_dir(out_dir or config.output_dir)
        library = _library(config)
        per_checkpoint = _fan_out(lambda p: _transfer_one(config, p, library, out), list(checkpoints),
                                  parallel, "Transfer")
        rows = [r for path in checkpoints for r in per_checkpoint[path]]
        snapshots = [os.path.join(out, e[4]) for _, e in rows if e[4]]
        rows += _aggregate_rows(rows)
        path = os.path.join(out, "transfer.csv")
        write_metrics_csv(path, [r for r, _ in rows], TRANSFER_COLUMNS, [e for _, e in rows])
        evaluations = sum(1 for r, _ in rows if r.phase == "transfer")
        provenance = _write_provenance(out, "transfer", config, list(config.seeds), [path] + snapshots,
                                       {"checkpoints": [os.path.abspath(p) for p in checkpoints],
                                        "store_snapshots": [os.path.basename(s) for s in snapshots]})
        print(f"[Transfer] {evaluations} evaluation rows written to {path} "
              f"({len(snapshots)} store snapshots)")
        return {"success": True, "exit_code": EXIT_OK, "transfer_csv": path,
                "evaluations": evaluations, "store_snapshots": snapshots, "provenance": provenance}
    return _run_command("Transfer", body)


# ── reevaluate ──

def reevaluate_snapshot(snapshot: str, library: GlyphLibrary, noise_rate: Optional[float] = None):
    """Replay one transfer attempt from its saved store. Returns (MetricsRow, extras)."""
    if not os.path.exists(snapshot):
        raise ConfigError("snapshots", f"missing store snapshot {snapshot}")
    tensors, metadata = load_checkpoint(snapshot)
    if metadata.get("kind") != "store":
        raise ValueError(f"{snapshot}: not a store snapshot (kind {metadata.get('kind')!r})")
    if noise_rate is not None and metadata["noise_rate"] != noise_rate:
        raise ConfigError("noise_rate", f"{snapshot} was evaluated with noise_rate "
                                        f"{metadata['noise_rate']}, config has {noise_rate}")
    kind, params, model_meta, digest = _load_model(metadata["checkpoint"])
    if digest != metadata["checkpoint_sha256"]:
        raise RuntimeError(f"{snapshot}: checkpoint {metadata['checkpoint']} changed since the snapshot")
    recorded = dict(metadata["protocol"])
    protocol = EvaluationProtocol(**{**recorded, "planner": PlannerConfig(**recorded["planner"])})
    task = TaskSpec.from_json(metadata["task"])
    seed, attempt = int(metadata["seed"]), int(metadata["attempt"])
    result = transfer_eval(params, task, protocol, _attempt_rng(seed, attempt, task.prototype), library,
                           store=EpisodicStore.from_tensors(tensors))
    env_steps = result.stats.env_steps + int(metadata["population_steps"])
    row = MetricsRow(f"{kind}-seed{seed}-{task.prototype.value}", "transfer", attempt,
                     task.prototype.value, task.seed, return_mean=result.stats.mean,
                     return_std=result.stats.std, oracle_norm=result.stats.oracle_norm,
                     env_steps=env_steps)
    trained_on = {parse_prototype(p) for p in model_meta.get("train_prototypes", [])}
    in_distribution = task.split == "train" and task.prototype in trained_on
    return row, [in_distribution, result.gradient_updates, digest, "", os.path.basename(snapshot)]


def cmd_reevaluate(config: ExperimentConfig, snapshots: list, out_dir: Optional[str] = None) -> dict:
    """Re-run transfer attempts from `.store` snapshots into reevaluation.csv."""
    def body():
        if not snapshots:
            raise ConfigError("snapshots", "no store snapshots given")
        out = ensure_output_dir(out_dir or config.output_dir)
        library = _library(config)
        rows = [reevaluate_snapshot(s, library, config.noise_rate) for s in snapshots]
        path = os.path.join(out, "reevaluation.csv")
        write_metrics_csv(path, [r for r, _ in rows], TRANSFER_COLUMNS, [e for _, e in rows])
        provenance = _write_provenance(out, "reevaluate", config, sorted({r.task_seed for r, _ in rows}),
                                       [path], {"store_snapshots": [os.path.abspath(s) for s in snapshots]})
        print(f"[Reevaluate] {len(rows)} rows written to {path}")
        return {"success": True, "exit_code": EXIT_OK, "reevaluation_csv": path,
                "evaluations": len(rows), "provenance": provenance}
    return _run_command("Reevaluate", body)


# ── oracle-dump ──

def cmd_oracle_dump(config: ExperimentConfig, out_dir: Optional[str] = None,
                    seed_override: Optional[int] = None) -> dict:
    """Exact Q*/V* tables for one task per (prototype, seed)."""
    def body():
        out = ensure_output_dir(out_dir or config.output_dir)
        seeds = _seeds(config, seed_override)
        library = _library(config)
        outputs = []
        prototypes = list(dict.fromkeys(config.train_prototypes + config.transfer_prototypes))
        for proto_name in prototypes:
            proto = parse_prototype(proto_name)
            for seed in seeds:
                task = make_task(proto, seed, "train", library, config.tree_depth)
                solution = exact_value_iteration(task, config.gamma)
                path = os.path.join(out, f"oracle_{proto.value}_seed{seed}.csv")
                dump_solution_csv(solution, path)
                with open(os.path.join(out, f"task_{proto.value}_seed{seed}.json"), "w") as f:
                    f.write(task.to_json() + "\n")
                outputs += [path, os.path.join(out, f"task_{proto.value}_seed{seed}.json")]
                print(f"[Oracle] {proto.value} seed {seed}: converged in {solution.iterations} sweeps")
        provenance = _write_provenance(out, "oracle-dump", config, seeds, outputs)
        return {"success": True, "exit_code": EXIT_OK, "files": outputs, "provenance": provenance}
    return _run_command("Oracle", body)


# ── gradcheck ──

def _pick_with_rewards(transitions: list, count: int, n_rewarding: int, rng: np.random.Generator) -> list:
    """`count` transitions, at least `n_rewarding` of them with non-zero reward when available."""
    rewarding = [t for t in transitions if t.reward != 0.0][:n_rewarding]
    rest = [t for t in transitions if t.reward == 0.0]
    need = count - len(rewarding)
    if need > len(rest):
        raise ValueError(f"Not enough transitions for a {count}-tuple selection")
    return rewarding + [rest[int(i)] for i in rng.choice(len(rest), size=need, replace=False)]


def build_gradcheck_data(task: TaskSpec, library: GlyphLibrary, rng: np.random.Generator,
                         per_action: int = GRADCHECK_STORE_PER_ACTION, batch_size: int = GRADCHECK_BATCH):
    """Small store and minibatch from uniform random play, each carrying rewarding tuples."""
    buffer = ReplayBuffer(capacity=400)
    collect(GraphWorldEnv(task, library), uniform_random_policy(task.n_actions), 400, buffer, rng)
    per_action_tuples = [_pick_with_rewards([t for t in buffer if t.action == a], per_action, 1, rng)
                         for a in range(task.n_actions)]
    store = EpisodicStore.from_transitions(per_action_tuples)
    batch = Batch.from_transitions(_pick_with_rewards(list(buffer), batch_size, 2, rng))
    return store, batch


def devi_gradient_check(params: EncoderParams, store: EpisodicStore, batch, config: PlannerConfig,
                        rng: np.random.Generator, n_coordinates: int = 200) -> dict:
    """Tape gradients of the fully coupled multi-horizon loss against central differences."""
    coupled = PlannerConfig(gamma=config.gamma, sweeps=config.sweeps, store_size=config.store_size,
                            temperature=config.temperature, block_target_gradients=False)
    tape = Tape()
    loss, _ = multi_horizon_loss(batch, BoundEncoder(params, tape), store, coupled)
    analytic = tape.backward(loss)

    def loss_fn(arrays):
        value, _ = multi_horizon_loss(batch, BoundEncoder(EncoderParams(params.descriptor, arrays)),
                                      store, coupled)
        return value.item()

    return gradient_check(loss_fn, analytic, params.arrays, rng, n_coordinates=n_coordinates)


def dqn_gradient_check(params: DqnParams, target: DqnParams, batch, gamma: float,
                       rng: np.random.Generator, n_coordinates: int = 200) -> dict:
    tape = Tape()
    analytic = tape.backward(dqn_td_loss(batch, BoundDqn(params, tape), target, gamma))
    descriptor = params.encoder.descriptor

    def loss_fn(arrays):
        return dqn_td_loss(batch, BoundDqn(DqnParams.from_arrays(descriptor, arrays)), target, gamma).item()

    return gradient_check(loss_fn, analytic, params.arrays(), rng, n_coordinates=n_coordinates)


def _report_line(name: str, report: dict) -> str:
    worst = report["worst"]
    status = "PASS" if report["passed"] else "FAIL"
    return (f"[GradCheck] {name}: {status} ({report['pass_fraction']:.1%} of {report['n_coordinates']} "
            f"coordinates within {report['tolerance']:g}); worst {worst['name']}[{worst['index']}] "
            f"analytic {worst['analytic']:.6e} numeric {worst['numeric']:.6e} "
            f"relative error {worst['relative_error']:.3e}")


def cmd_gradcheck(config: ExperimentConfig, out_dir: Optional[str] = None,
                  seed_override: Optional[int] = None) -> dict:
    """PASS/FAIL report for DEVI and DQN gradients; exit code 3 on any FAIL."""
    def body():
        out = ensure_output_dir(out_dir or config.output_dir)
        if not build_encoder(config.encoder).arrays:
            raise ConfigError("encoder", f"'{config.encoder}' has no parameters to check")
        seed = _seeds(config, seed_override)[0]
        library = _library(config)
        rng = np.random.default_rng(seed)
        task = make_task(config.train_prototypes[0], seed, "train", library, config.tree_depth)
        store, batch = build_gradcheck_data(task, library, rng)
        planner = PlannerConfig(gamma=config.gamma, sweeps=min(config.sweeps, GRADCHECK_SWEEPS),
                                store_size=GRADCHECK_STORE_PER_ACTION, temperature=config.temperature)
        reports = {
            "devi": devi_gradient_check(build_encoder(config.encoder, rng=rng), store, batch, planner, rng),
            "dqn": dqn_gradient_check(init_dqn(config.encoder, rng=rng), init_dqn(config.encoder, rng=rng),
                                      batch, config.gamma, rng),
        }
        for name, report in reports.items():
            print(_report_line(name, report))
        path = os.path.join(out, "gradcheck.json")
        with open(path, "w") as f:
            json.dump(reports, f, indent=2, sort_keys=True)
            f.write("\n")
        _write_provenance(out, "gradcheck", config, [seed], [path])
        passed = all(r["passed"] for r in reports.values())
        if not passed:
            failed = [name for name, r in reports.items() if not r["passed"]]
            return {"error": f"Gradient check failed for {failed}", "exit_code": EXIT_RUNTIME,
                    "reports": reports, "report_path": path}
        return {"success": True, "exit_code": EXIT_OK, "reports": reports, "report_path": path}
    return _run_command("GradCheck", body)


# ── plot ──

def cmd_plot(csv_paths: list, out_path: str) -> dict:
    def body():
        if not csv_paths:
            raise ValueError("No metrics CSVs given")
        info = plot_metrics(csv_paths, out_path)
        return {"success": True, "exit_code": EXIT_OK, **info}
    return _run_command("Plot", body)


# ── Entry point ──

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="experiment_cli",
                                     description="DEVI / DQN graph-world transfer experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None, help="JSON experiment file")
        p.add_argument("--out", type=str, default=None, help="Output directory (overrides output_dir)")
        p.add_argument("--parallel", type=int, default=None, help="Worker threads for seed fan-out")
        p.add_argument("--seed-override", type=int, default=None, help="Run this single seed only")

    common(sub.add_parser("train", help="Train one model per seed"))
    transfer = sub.add_parser("transfer", help="Frozen-weight transfer evaluation")
    common(transfer)
    transfer.add_argument("--checkpoints", nargs="*", default=None,
                          help="Checkpoint files (default: every *.ckpt in the output directory)")
    reevaluate = sub.add_parser("reevaluate", help="Replay transfer attempts from store snapshots")
    common(reevaluate)
    reevaluate.add_argument("--snapshots", nargs="*", default=None,
                            help="Store snapshots (default: every store_*.store in the output directory)")
    common(sub.add_parser("oracle-dump", help="Write exact Q*/V* tables"))
    common(sub.add_parser("gradcheck", help="Finite-difference gradient check"))
    plot = sub.add_parser("plot", help="SVG curves from metrics CSVs")
    plot.add_argument("csv", nargs="*", help="Metrics or transfer CSV files")
    plot.add_argument("--out", type=str, default="curves.svg", help="SVG output path")
    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "plot":
        result = cmd_plot(args.csv, args.out)
    else:
        try:
            config = load_config(args.config)
            parallel = args.parallel if args.parallel is not None else env_parallel()
            if parallel < 1:
                raise ConfigError("--parallel", f"must be >= 1, got {parallel}")
            if args.seed_override is not None and args.seed_override < 0:
                raise ConfigError("--seed-override", f"must be >= 0, got {args.seed_override}")
        except ConfigError as e:
            print(f"[Config] {e}")
            return EXIT_CONFIG

        if args.command == "train":
            result = cmd_train(config, args.out, parallel, args.seed_override)
        elif args.command == "transfer":
            checkpoints = args.checkpoints
            if not checkpoints:
                checkpoints = sorted(glob.glob(os.path.join(args.out or config.output_dir, "*.ckpt")))
            result = cmd_transfer(config, checkpoints, args.out, parallel)
        elif args.command == "reevaluate":
            snapshots = args.snapshots
            if not snapshots:
                snapshots = sorted(glob.glob(os.path.join(args.out or config.output_dir, "store_*.store")))
            result = cmd_reevaluate(config, snapshots, args.out)
        elif args.command == "oracle-dump":
            result = cmd_oracle_dump(config, args.out, args.seed_override)
        else:
            result = cmd_gradcheck(config, args.out, args.seed_override)

    if "error" in result:
        print(f"ERROR: {result['error']}")
    return result.get("exit_code", EXIT_RUNTIME if "error" in result else EXIT_OK)


if __name__ == "__main__":
    sys.exit(main())
