# Command output
TRAIN_STARTED = "🚀 Training {method} (seed {seed}) -> {out}"
TRAIN_FINISHED = "✅ Run finished: MF={mf:.4f}, IMF={imf:.4f}"
RUN_COLLAPSED = "⚠️ Generative collapse detected: {reason}"
RUN_FAILED = "❌ Run aborted: {reason}"
CONFIG_ERROR = "❌ Config error: {error}"
USAGE_ERROR = "❌ {error}"

EVAL_FINISHED = "✅ Task {k} re-evaluated: {row} -> {path}"

SWEEP_PLAN = "📊 Sweep: {count} points ({mode} mode)"
SWEEP_FINISHED = "✅ Sweep summary written to {path}"
ABLATION_FINISHED = "✅ Ablation table written to {path}"
POINTS_FAILED = "⚠️ {count} point(s) collapsed or failed"

REPORT_SKIPPED = "⚠️ Skipping {path}: {reason}"
REPORT_FINISHED = "✅ Report for {count} run(s) written to {path}"
NO_RUNS = "no run.json found under {path}"

# Markdown report
REPORT_HEADER = """# Continual diffusion runs

{count} run(s) aggregated from `{root}`.

## Summary

| run | method | seed | status | MF | IMF |
|---|---|---|---|---|---|
"""

REPORT_ROW = "| {run} | {method} | {seed} | {status} | {mf} | {imf} |\n"

REPORT_CURVE_HEADER = """
## Forgetting curve

Fidelity distance of task 1 after training on task k (lower is better).

| run | {columns} |
|---|{separators}
"""

REPORT_BUFFER_HEADER = """
## Methods by buffer size

Mean over complete runs; buffer `-` means the method keeps no replay.

| method | buffer | runs | MF | IMF |
|---|---|---|---|---|
"""

REPORT_BUFFER_ROW = "| {method} | {buffer} | {runs} | {mf} | {imf} |\n"

REPORT_FOOTER = """
Plot data: `forgetting_curve.csv` (run, k, fd_task1); metrics: `report_metrics.csv`;
method by buffer: `report_method_buffer.csv`.
"""
