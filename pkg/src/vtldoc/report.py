"""Figure and delimited-output rendering for training and evaluation runs."""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def write_step_csv(log: list[dict], path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=["step", "task", "loss", "rate", "resolution"])
        writer.writeheader()
        writer.writerows(log)
    os.replace(tmp, path)


def render_loss_curve(log: list[dict], path: str) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    tasks = sorted({e["task"] for e in log})
    for task in tasks:
        pts = [(e["step"], e["loss"]) for e in log if e["task"] == task]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=task, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    stages = sorted({e["resolution"] for e in log})
    ax.set_title(f"training loss (resolutions {stages})")
    fig.tight_layout()
    tmp = path + ".tmp.png"
    fig.savefig(tmp, dpi=120)
    plt.close(fig)
    os.replace(tmp, path)


def write_report_csv(reports: list[dict], path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=["task", "metric", "value", "count"])
        writer.writeheader()
        writer.writerows(reports)
    os.replace(tmp, path)


def render_metric_bars(reports: list[dict], path: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [f"{r['task']}\n({r['metric']})" for r in reports]
    values = [r["value"] for r in reports]
    ax.bar(range(len(labels)), values, color="steelblue")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("metric value")
    for i, v in enumerate(values):
        ax.text(i, v + 0.02, f"{v:.3f}", ha="center", fontsize=8)
    fig.tight_layout()
    tmp = path + ".tmp.png"
    fig.savefig(tmp, dpi=120)
    plt.close(fig)
    os.replace(tmp, path)
