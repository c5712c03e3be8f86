#!/usr/bin/env python3
"""
Replay buffer size sweep for the Class-IL benchmark.

Runs the experiment CLI once per buffer size on a cl_bench config and
collects final accuracy, BWT and forgetting from each run's aggregate.json.

Usage:
    python3 tasks/task_buffer_sweep.py --config configs/cl_bench.json --output buffer_results.txt

Example:
    python3 tasks/task_buffer_sweep.py --config configs/cl_bench_mnist.json --seeds 0,1,2
"""

import argparse
import json
import os
import subprocess
import sys
import tempfile
import time

BUFFER_SIZES = [200, 500, 5120]
METRICS = ['final_acc', 'bwt', 'forgetting']


def run_experiment(config_path, buffer_size, seeds, out_dir):
    """
    Run the CLI on a copy of the config with cl.buffer replaced.

    Returns:
        (aggregate dict, elapsed seconds), or (None, elapsed) on failure
    """
    with open(config_path) as f:
        config = json.load(f)
    config['cl.buffer'] = buffer_size
    if config.get('kind') != 'cl_bench':
        print(f"  ERROR: {config_path} is not a cl_bench config")
        return None, 0.0

    with tempfile.NamedTemporaryFile('w', suffix='.json', delete=False) as tmp:
        json.dump(config, tmp)
    cmd = [sys.executable, 'src/experiment.py', 'run', tmp.name, '--out-dir', out_dir]
    if seeds:
        cmd += ['--seed-override', seeds]

    start = time.time()
    try:
        result = subprocess.run(cmd, capture_output=True, timeout=7200)
        elapsed = time.time() - start
        if result.returncode != 0:
            print(f"  ERROR: run failed with exit code {result.returncode}")
            print(result.stdout.decode(errors='replace').strip())
            return None, elapsed
        with open(os.path.join(out_dir, 'aggregate.json')) as f:
            return json.load(f), elapsed
    except subprocess.TimeoutExpired:
        print("  ERROR: run timed out after 7200 seconds")
        return None, time.time() - start
    finally:
        os.remove(tmp.name)


def main():
    parser = argparse.ArgumentParser(
        description='Measure the effect of replay buffer size on Class-IL metrics'
    )
    parser.add_argument('--config', required=True, help='cl_bench experiment config')
    parser.add_argument('--seeds', default=None, help='Comma-separated seeds (default: from config)')
    parser.add_argument('--out-root', default='runs/buffer_sweep',
                        help='Directory for per-size runs (default: runs/buffer_sweep)')
    parser.add_argument('--output', default='buffer_results.txt',
                        help='Output file for results (default: buffer_results.txt)')

    args = parser.parse_args()

    if not os.path.exists(args.config):
        print(f"ERROR: Config file not found: {args.config}")
        sys.exit(1)
    if not os.path.exists('src/experiment.py'):
        print("ERROR: src/experiment.py not found. Run this script from project root directory.")
        sys.exit(1)

    print("=" * 70)
    print("Replay buffer size sweep")
    print("=" * 70)
    print(f"Config: {args.config}")
    print(f"Buffer sizes: {BUFFER_SIZES}")
    print(f"Seeds: {args.seeds or 'from config'}")
    print("=" * 70)
    print()

    results = {}
    for size in BUFFER_SIZES:
        print(f"Buffer size = {size}:", end=' ', flush=True)
        aggregate, elapsed = run_experiment(args.config, size, args.seeds,
                                            os.path.join(args.out_root, f"buffer_{size}"))
        if aggregate is None:
            print("FAILED")
            continue
        results[size] = aggregate['results']
        print(f"done in {elapsed:.1f}s")

    methods = sorted({m for res in results.values() for m in res})

    print(f"Writing results to {args.output}...")
    with open(args.output, 'w') as f:
        f.write("Replay buffer size sweep (Class-IL)\n")
        f.write("=" * 70 + "\n\n")
        f.write(f"Config: {args.config}\n")
        f.write(f"Seeds: {args.seeds or 'from config'}\n\n")
        f.write("Buffer\tMethod\t" + "\t".join(f"{m} (mean +- std)" for m in METRICS) + "\n")
        f.write("-" * 70 + "\n")
        for size in BUFFER_SIZES:
            if size not in results:
                f.write(f"{size}\tFAILED\n")
                continue
            for method in methods:
                row = results[size].get(method)
                if row is None:
                    continue
                cells = [f"{row[m]['mean']:.2f} +- {row[m]['std']:.2f}" for m in METRICS]
                f.write(f"{size}\t{method}\t" + "\t".join(cells) + "\n")

    print(f"Results saved to {args.output}")

    print("\n" + "=" * 70)
    print("SUMMARY (final accuracy %)")
    print("=" * 70)
    print(f"{'Buffer':<10}" + "".join(f"{m:<12}" for m in methods))
    print("-" * 70)
    for size in BUFFER_SIZES:
        if size in results:
            cells = "".join(f"{results[size][m]['final_acc']['mean']:<12.2f}" if m in results[size] else f"{'-':<12}"
                            for m in methods)
            print(f"{size:<10}{cells}")
    print("=" * 70)


if __name__ == '__main__':
    main()
