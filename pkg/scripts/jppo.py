#!/usr/bin/env python3
"""
Experiment runner for the joint power and prompt-compression optimizer.

Subcommands:
    train      Train a double-DQN agent and write metrics, checkpoint and reports
    eval       Greedy evaluation of a checkpoint (or a reference policy) with regret vs the oracle
    oracle     Build the brute-force policy table
    calibrate  Fit encode-time coefficients to observed timings
    sweep      Train and evaluate several seeds and aggregate the results
    props      Run the property suite
    reproduce  Re-run a command from its manifest and compare artifacts

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

import os
import sys
import argparse
import logging
import concurrent.futures

import numpy as np
import pandas as pd
import prettytable
from dotenv import load_dotenv
from tqdm import tqdm

from config_loader import RunConfig, load_config, load_config_dict
from ddqn_agent import GreedyPolicy, load_checkpoint, save_checkpoint, train
from jppo_env import FixedPolicy, JPPOEnv, RandomPolicy, VIOLATION_TAGS, rollout, summarize_rollout
from jppo_errors import CalibrationError, ConfigError, JPPOError, MetricsSchemaError, ShapeMismatchError
from policy_oracle import PolicyTable, optimal_policy, regret
from run_records import (EPISODE_SCHEMA, EVAL_SCHEMA, MANIFEST_NAME, STEP_SCHEMA, MetricsWriter, RunManifest,
                         json_safe, write_eval_report, write_metrics, write_training_report,
                         write_training_summary)
from service_costs import baseline_action
from timing_calibration import fit_compute_profile, load_timings, write_fragment

logger = logging.getLogger("jppo")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

DEFAULT_EVAL_EPISODES = 100
POWER_BAND_W = (4.0, 5.0)
POWER_GAP_LIMIT_W = 1.0
DETERMINISTIC_ARTIFACTS = ("metrics", "checkpoint", "training_summary", "policy_table", "eval_metrics",
                           "step_log", "sweep_runs", "compute_profile")


def default_out_dir(command):
    return os.path.join(os.environ.get("JPPO_OUT_DIR", "jppo_output"), command)


def _config_from(args):
    return load_config(args.config) if args.config else RunConfig()


# ---------------------------------------------------------------- train

def run_training(config, out_dir, step_log=False, progress=True):
    """Train on config and write all training artifacts into out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    env = JPPOEnv(config.env)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    checkpoint_path = os.path.join(out_dir, "checkpoint.json")
    summary_path = os.path.join(out_dir, "training_summary.csv")
    report_path = os.path.join(out_dir, "training_report.md")

    step_writer = MetricsWriter(os.path.join(out_dir, "steps.jsonl"), STEP_SCHEMA) if step_log else None
    sink = (lambda ep, t, n, outcome: step_writer.write(outcome.to_record(ep, t, n))) if step_writer else None
    try:
        result = train(env, config.agent, config.episodes, seed=config.env.seed, step_sink=sink, progress=progress)
    finally:
        if step_writer:
            step_writer.close()

    write_metrics(metrics_path, EPISODE_SCHEMA, result.metrics)
    # the post-loop policy update is the final checkpoint write
    save_checkpoint(checkpoint_path, result.net, result.target_net,
                    metadata={"episodes": config.episodes, "seed": config.env.seed})
    summary = write_training_summary(result.metrics, summary_path)
    write_training_report(report_path, summary, config, checkpoint_path)

    manifest = RunManifest(command="train", config=config.to_dict(), seeds=[config.env.seed],
                           arguments={"step_log": bool(step_log)})
    manifest.add_artifact("metrics", metrics_path, out_dir)
    manifest.add_artifact("checkpoint", checkpoint_path, out_dir)
    manifest.add_artifact("training_summary", summary_path, out_dir)
    manifest.add_artifact("training_report", report_path, out_dir)
    if step_log:
        manifest.add_artifact("step_log", os.path.join(out_dir, "steps.jsonl"), out_dir)
    manifest.finish()
    manifest.write(out_dir)
    return result, manifest


def cmd_train(args):
    config = _config_from(args).with_overrides(seed=args.seed, episodes=args.episodes)
    out_dir = args.out or default_out_dir("train")
    print(f"Training {config.episodes} episodes (seed {config.env.seed}) -> {out_dir}")
    result, manifest = run_training(config, out_dir, step_log=args.step_log, progress=not args.no_progress)
    last = result.metrics[-1]
    print(f"Final episode: total reward {last['total_reward']:.2f}, mean fidelity "
          f"{last.get('mean_fidelity', float('nan')):.4f}, epsilon {last['epsilon']:.3f}")
    print(f"Manifest written to {os.path.join(out_dir, MANIFEST_NAME)}")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def evaluate_policy(config, policy, policy_name, table, episodes, seed):
    """Greedy rollout summary with baseline latency comparison and regret against the table."""
    steps = rollout(config.env, policy, episodes, seed)
    summary = summarize_rollout(steps)
    baseline = summarize_rollout(rollout(config.env, FixedPolicy(baseline_action(config.env.reference_power_level)),
                                         episodes, seed))
    report = regret(policy, table, config.env, episodes, seed, policy_steps=steps)
    record = {
        "policy": policy_name,
        "seed": seed,
        "episodes": episodes,
        "steps": summary["steps"],
        "mean_reward": summary["mean_reward"],
        "mean_fidelity": summary["mean_fidelity"],
        "mean_ber": summary["mean_ber"],
        "mean_power_w": summary["mean_power_w"],
        "mean_latency_s": summary["mean_latency_s"],
        "mean_energy_j": summary["mean_energy_j"],
        "violation_rate": summary["violation_rate"],
        "baseline_mean_latency_s": baseline["mean_latency_s"],
        "latency_improvement": 1.0 - summary["mean_latency_s"] / baseline["mean_latency_s"],
        "oracle_mean_reward": report.oracle_mean_reward,
        "regret_gap": report.gap,
        "regret_relative": report.relative_gap,
        "agreement": report.agreement,
        "oracle_expected_optimum": report.expected_optimum,
        "oracle_mean_power_w": report.oracle_summary["mean_power_w"],
        "power_gap_w": summary["mean_power_w"] - report.oracle_summary["mean_power_w"],
        "oracle_mean_fidelity": report.oracle_summary["mean_fidelity"],
    }
    for tag in VIOLATION_TAGS:
        record[f"violations_{tag}"] = summary[f"violations_{tag}"]
    return record, report.note


def power_warnings(record):
    warnings = []
    lo, hi = POWER_BAND_W
    if not lo <= record["mean_power_w"] <= hi:
        warnings.append(f"Mean transmit power {record['mean_power_w']:.2f} W is outside the {lo:g}-{hi:g} W band "
                        "(informational)")
    if abs(record["power_gap_w"]) > POWER_GAP_LIMIT_W:
        warnings.append(f"Mean power differs from the oracle policy by {record['power_gap_w']:+.2f} W")
    return warnings


def _load_or_build_table(config, path):
    if path:
        return PolicyTable.load(path)
    o = config.oracle
    print(f"No policy table given; building one ({o.bins} bins, {o.mc_samples} samples)")
    return optimal_policy(config.env, bins=o.bins, mc_samples=o.mc_samples, snr_min=o.snr_min,
                          snr_max=o.snr_max, workers=o.workers)


def _policy_for(args, config, table):
    if args.policy == "checkpoint":
        if not args.checkpoint:
            raise ConfigError("--checkpoint is required with --policy checkpoint")
        net, _, _ = load_checkpoint(args.checkpoint)
        if net.input_dim != JPPOEnv.state_dim or net.output_dim != JPPOEnv.num_actions:
            raise ShapeMismatchError(f"Checkpoint maps {net.input_dim} -> {net.output_dim}, expected "
                                     f"{JPPOEnv.state_dim} -> {JPPOEnv.num_actions}")
        return GreedyPolicy(net)
    if args.policy == "oracle":
        return table
    if args.policy == "baseline":
        return FixedPolicy(baseline_action(config.env.reference_power_level))
    return RandomPolicy(args.seed if args.seed is not None else config.env.seed)


def print_eval_table(record):
    table = prettytable.PrettyTable()
    table.field_names = ["Metric", "Value"]
    table.align["Metric"] = "l"
    for key in ("mean_reward", "mean_fidelity", "mean_ber", "mean_power_w", "mean_latency_s", "violation_rate",
                "latency_improvement", "oracle_mean_reward", "regret_gap", "regret_relative", "agreement",
                "power_gap_w"):
        value = record[key]
        table.add_row([key, "n/a" if value is None else f"{value:.4f}"])
    print(table)


def cmd_eval(args):
    config = _config_from(args)
    seed = args.seed if args.seed is not None else config.env.seed
    out_dir = args.out or default_out_dir("eval")
    os.makedirs(out_dir, exist_ok=True)
    table = _load_or_build_table(config, args.oracle)
    policy = _policy_for(args, config, table)

    print(f"Evaluating {args.policy} policy over {args.episodes} episodes (seed {seed})")
    record, note = evaluate_policy(config, policy, args.policy, table, args.episodes, seed)
    warnings = power_warnings(record)
    for w in warnings:
        logger.warning(w)

    metrics_path = write_metrics(os.path.join(out_dir, "eval_metrics.jsonl"), EVAL_SCHEMA, [record])
    report_path = write_eval_report(os.path.join(out_dir, "eval_report.md"), json_safe(record), warnings, note)
    manifest = RunManifest(command="eval", config=config.to_dict(), seeds=[seed],
                           arguments={"policy": args.policy, "episodes": args.episodes,
                                      "checkpoint": args.checkpoint, "oracle": args.oracle})
    manifest.add_artifact("eval_metrics", metrics_path, out_dir)
    manifest.add_artifact("eval_report", report_path, out_dir)
    manifest.finish()
    manifest.write(out_dir)
    print_eval_table(record)
    print(f"Report written to {report_path}")
    return EXIT_OK


# ---------------------------------------------------------------- oracle

def cmd_oracle(args):
    config = _config_from(args)
    o = config.oracle
    bins = args.bins if args.bins is not None else o.bins
    samples = args.samples if args.samples is not None else o.mc_samples
    seed = args.seed if args.seed is not None else config.env.seed
    out_dir = args.out or default_out_dir("oracle")
    os.makedirs(out_dir, exist_ok=True)

    print(f"Building policy table: {bins} SNR bins x 50 actions, {samples} fading samples per bin")
    table = optimal_policy(config.env, bins=bins, mc_samples=samples, seed=seed, snr_min=o.snr_min,
                           snr_max=o.snr_max, workers=args.workers or o.workers)
    path = table.save(os.path.join(out_dir, "policy_table.tsv"))

    pt = prettytable.PrettyTable(["Bin", "SNR range", "Action", "P_T (W)", "E[reward]", "Std err"])
    for b, action in enumerate(table.best_actions):
        lo, hi = table.snr_bin_edges[b], table.snr_bin_edges[b + 1]
        pt.add_row([b, f"[{lo:.3g}, {hi:.3g})", str(action), f"{action.power_w:.1f}",
                    f"{table.expected_rewards[b]:.4f}", f"{table.std_errors[b]:.2e}"])
    print(pt)
    print(f"Expected optimum per request: {table.expected_optimum:.4f}; "
          f"expected power {table.expected_power_w:.2f} W")

    manifest = RunManifest(command="oracle", config=config.to_dict(), seeds=[seed],
                           arguments={"bins": bins, "samples": samples})
    manifest.add_artifact("policy_table", path, out_dir)
    manifest.finish()
    manifest.write(out_dir)
    print(f"Policy table written to {path}")
    return EXIT_OK


# ---------------------------------------------------------------- calibrate

def cmd_calibrate(args):
    df = load_timings(args.timings)
    result = fit_compute_profile(df, output_tokens=args.output_tokens)
    out_dir = args.out or default_out_dir("calibrate")
    os.makedirs(out_dir, exist_ok=True)
    fragment_path = write_fragment(os.path.join(out_dir, "compute_profile.yaml"), result.profile)
    residual_path = os.path.join(out_dir, "calibration_residuals.csv")
    result.residuals.to_csv(residual_path, index=False, float_format="%.6f")

    p = result.profile
    print(f"slm_time_per_token_s = {p.slm_time_per_token_s:.6f}")
    print(f"llm_time_per_token_s = {p.llm_time_per_token_s:.6f}")
    print(f"llm_fixed_overhead_s = {p.llm_fixed_overhead_s:.4f}  (output_tokens held at {p.output_tokens})")
    table = prettytable.PrettyTable(["Tokens", "Kappa", "Observed (s)", "Fitted (s)", "Residual (s)"])
    for row in result.residuals.itertuples(index=False):
        table.add_row([row.tokens, f"{row.kappa:.3f}", f"{row.seconds:.2f}", f"{row.fitted:.2f}",
                       f"{row.residual:+.3f}"])
    print(table)
    for tokens, gain in result.improvements.items():
        print(f"Latency improvement at kappa=0.25 for {tokens} tokens: {gain:.2%}")
    print(f"Mean over lengths: {result.mean_improvement:.2%}; pooled: {result.pooled_improvement:.2%}; "
          f"rmse {result.rmse:.3f} s")

    manifest = RunManifest(command="calibrate", config={}, seeds=[],
                           arguments={"timings": os.path.abspath(args.timings), "output_tokens": args.output_tokens})
    manifest.add_artifact("compute_profile", fragment_path, out_dir)
    manifest.add_artifact("calibration_residuals", residual_path, out_dir)
    manifest.finish()
    manifest.write(out_dir)
    return EXIT_OK


# ---------------------------------------------------------------- sweep

def _sweep_worker(config_dict, seed, episodes, eval_episodes, table_path, out_dir):
    """Train and evaluate one seed in its own process."""
    config = load_config_dict(config_dict).with_overrides(seed=seed, episodes=episodes)
    result, _ = run_training(config, os.path.join(out_dir, f"seed_{seed}"), progress=False)
    table = PolicyTable.load(table_path)
    record, _ = evaluate_policy(config, GreedyPolicy(result.net), "checkpoint", table, eval_episodes, seed)
    return record


def aggregate_sweep(records):
    """Mean and population standard deviation of every numeric metric across seeds."""
    df = pd.DataFrame(records)
    numeric = df.drop(columns=["policy", "seed"], errors="ignore").select_dtypes(include="number")
    return pd.DataFrame({"mean": numeric.mean(), "std": numeric.std(ddof=0)}).rename_axis("metric")


def cmd_sweep(args):
    config = _config_from(args)
    if args.seeds < 1:
        raise ConfigError("--seeds must be at least 1")
    episodes = args.episodes or config.episodes
    out_dir = args.out or default_out_dir("sweep")
    os.makedirs(out_dir, exist_ok=True)

    o = config.oracle
    table = optimal_policy(config.env, bins=o.bins, mc_samples=o.mc_samples, snr_min=o.snr_min,
                           snr_max=o.snr_max, workers=o.workers)
    table_path = table.save(os.path.join(out_dir, "policy_table.tsv"))

    seeds = list(range(1, args.seeds + 1))
    print(f"Sweeping seeds {seeds[0]}..{seeds[-1]} with {episodes} episodes each ({args.workers} workers)")
    records, failed = [], {}
    with concurrent.futures.ProcessPoolExecutor(max_workers=args.workers) as executor:
        futures = {executor.submit(_sweep_worker, config.to_dict(), s, episodes, args.eval_episodes, table_path,
                                   out_dir): s for s in seeds}
        for future in tqdm(concurrent.futures.as_completed(futures), total=len(futures), desc="Seeds",
                           disable=args.no_progress):
            seed = futures[future]
            try:
                records.append(future.result())
            except Exception as e:
                logger.error("Seed %d failed: %s", seed, e)
                failed[seed] = str(e)

    records.sort(key=lambda r: r["seed"])
    runs_path = os.path.join(out_dir, "sweep_runs.csv")
    summary_path = os.path.join(out_dir, "sweep_summary.csv")
    report_path = os.path.join(out_dir, "sweep_report.md")
    if records:
        pd.DataFrame(json_safe(records)).to_csv(runs_path, index=False, float_format="%.10g")
        agg = aggregate_sweep(records)
        agg.to_csv(summary_path, float_format="%.10g")
    else:
        agg = None

    with open(report_path, "w", encoding="utf-8") as f:
        f.write("# Seed Sweep Report\n\n")
        f.write(f"- Seeds requested: {len(seeds)}\n- Succeeded: {len(records)}\n- Failed: {len(failed)}\n\n")
        if agg is not None:
            f.write("| Metric | Mean | Std |\n|---|---|---|\n")
            for metric, row in agg.iterrows():
                f.write(f"| {metric} | {row['mean']:.6g} | {row['std']:.6g} |\n")
        if failed:
            f.write("\n## Failed seeds\n\n")
            for seed, message in sorted(failed.items()):
                f.write(f"- seed {seed}: {message}\n")

    if agg is not None:
        pt = prettytable.PrettyTable(["Metric", "Mean", "Std"])
        pt.align["Metric"] = "l"
        for metric in ("mean_reward", "mean_fidelity", "mean_ber", "mean_power_w", "violation_rate",
                       "latency_improvement", "regret_relative"):
            pt.add_row([metric, f"{agg.loc[metric, 'mean']:.4f}", f"{agg.loc[metric, 'std']:.4f}"])
        print(pt)

    manifest = RunManifest(command="sweep", config=config.to_dict(), seeds=seeds,
                           arguments={"episodes": episodes, "eval_episodes": args.eval_episodes})
    manifest.add_artifact("policy_table", table_path, out_dir)
    if records:
        manifest.add_artifact("sweep_runs", runs_path, out_dir)
        manifest.add_artifact("sweep_summary", summary_path, out_dir)
    manifest.add_artifact("sweep_report", report_path, out_dir)
    manifest.finish()
    manifest.write(out_dir)

    if failed:
        print(f"Failed seeds: {', '.join(str(s) for s in sorted(failed))}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# ---------------------------------------------------------------- props

def cmd_props(args):
    from property_suite import run_all, write_reports

    out_dir = args.out or default_out_dir("props")
    os.makedirs(out_dir, exist_ok=True)
    report = run_all(args.profile, seed=args.seed)
    text_path, json_path = write_reports(report, out_dir)
    print(report.as_text())
    print(f"Reports written to {text_path} and {json_path}")
    return EXIT_OK if report.passed else EXIT_RUNTIME


# ---------------------------------------------------------------- reproduce

def cmd_reproduce(args):
    manifest = RunManifest.load(args.manifest)
    if manifest.command != "train":
        raise ConfigError(f"Only train manifests can be reproduced, got {manifest.command!r}")
    config = load_config_dict(manifest.config)
    out_dir = args.out or default_out_dir("reproduce")
    print(f"Re-running {manifest.command} for seed {config.env.seed} into {out_dir}")
    _, rerun = run_training(config, out_dir, step_log=manifest.arguments.get("step_log", False),
                            progress=not args.no_progress)
    mismatched = []
    for name, entry in manifest.artifacts.items():
        if name not in DETERMINISTIC_ARTIFACTS:
            continue
        new_hash = rerun.artifacts.get(name, {}).get("sha256")
        status = "identical" if new_hash == entry["sha256"] else "DIFFERENT"
        print(f"  {name:<18} {status}")
        if new_hash != entry["sha256"]:
            mismatched.append(name)
    if mismatched:
        print(f"Artifacts differ: {', '.join(mismatched)}", file=sys.stderr)
        return EXIT_RUNTIME
    print("All artifacts reproduced byte-for-byte")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser():
    parser = argparse.ArgumentParser(
        description="Joint power and prompt-compression optimizer for network-aided LLM services.")
    parser.add_argument("--log-level", default=None,
                        help="Logging level (default: $JPPO_LOG_LEVEL or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train a double-DQN agent")
    p.add_argument("--config", help="YAML configuration file (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="Override the configured seed")
    p.add_argument("--episodes", type=int, help="Override the configured episode count")
    p.add_argument("--out", help="Output directory (default: $JPPO_OUT_DIR/train)")
    p.add_argument("--step-log", action="store_true", help="Also write one record per request")
    p.add_argument("--no-progress", action="store_true", help="Hide the progress bar")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Evaluate a policy greedily")
    p.add_argument("--checkpoint", help="Checkpoint written by train")
    p.add_argument("--config", help="YAML configuration file")
    p.add_argument("--oracle", help="Policy table written by the oracle command (built when omitted)")
    p.add_argument("--policy", choices=["checkpoint", "oracle", "baseline", "random"], default="checkpoint")
    p.add_argument("--episodes", type=int, default=DEFAULT_EVAL_EPISODES, help="Evaluation episodes")
    p.add_argument("--seed", type=int, help="Evaluation seed (default: configured seed)")
    p.add_argument("--out", help="Output directory (default: $JPPO_OUT_DIR/eval)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle", help="Build the brute-force policy table")
    p.add_argument("--config", help="YAML configuration file")
    p.add_argument("--bins", type=int, help="Number of SNR bins")
    p.add_argument("--samples", type=int, help="Monte Carlo fading samples per bin")
    p.add_argument("--seed", type=int, help="Sampling seed")
    p.add_argument("--workers", type=int, help="Parallel bin workers")
    p.add_argument("--out", help="Output directory (default: $JPPO_OUT_DIR/oracle)")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("calibrate", help="Fit encode-time coefficients to timings")
    p.add_argument("--timings", required=True, help="CSV with columns tokens, kappa, seconds")
    p.add_argument("--output-tokens", type=int, default=60, help="Response length held fixed in the fit")
    p.add_argument("--out", help="Output directory (default: $JPPO_OUT_DIR/calibrate)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("sweep", help="Train and evaluate seeds 1..K")
    p.add_argument("--config", help="YAML configuration file")
    p.add_argument("--seeds", type=int, default=10, help="Number of seeds K")
    p.add_argument("--episodes", type=int, help="Training episodes per seed")
    p.add_argument("--eval-episodes", type=int, default=DEFAULT_EVAL_EPISODES)
    p.add_argument("--workers", type=int, default=4, help="Parallel worker processes")
    p.add_argument("--out", help="Output directory (default: $JPPO_OUT_DIR/sweep)")
    p.add_argument("--no-progress", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("props", help="Run the property suite")
    p.add_argument("--profile", choices=["default", "quick"], default="default")
    p.add_argument("--seed", type=int, default=0, help="Master seed")
    p.add_argument("--out", help="Output directory (default: $JPPO_OUT_DIR/props)")
    p.set_defaults(func=cmd_props)

    p = sub.add_parser("reproduce", help="Re-run a train manifest and compare artifacts")
    p.add_argument("--manifest", required=True, help="manifest.json of a previous train run")
    p.add_argument("--out", help="Output directory (default: $JPPO_OUT_DIR/reproduce)")
    p.add_argument("--no-progress", action="store_true")
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None):
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE

    level = (args.log_level or os.environ.get("JPPO_LOG_LEVEL") or "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore")

    try:
        return args.func(args)
    except (ConfigError, MetricsSchemaError, CalibrationError, ShapeMismatchError) as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (JPPOError, OSError) as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
