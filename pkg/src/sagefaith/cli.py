"""Command-line client.

Talks to a running service when ``--server`` is given and to an in-process
instance of the same app otherwise, so both paths produce identical bytes.
"""

from __future__ import annotations

import json
import sys
import warnings
from pathlib import Path

import click
import httpx

from . import __version__


class Backend:
    def __init__(self, server: str | None):
        if server:
            self._client = httpx.Client(base_url=server.rstrip("/"), timeout=None)
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                from fastapi.testclient import TestClient

            from .api import app

            self._client = TestClient(app)

    def post(self, path: str, body: dict) -> dict:
        try:
            resp = self._client.post(path, json=body)
        except httpx.HTTPError as exc:
            raise click.ClickException(f"cannot reach service: {exc}") from exc
        if resp.status_code != 200:
            try:
                detail = resp.json().get("detail", resp.text)
            except ValueError:
                detail = resp.text
            if isinstance(detail, dict):
                lines = [detail.get("message", "")]
                lines += [f"  line {e['line']}: {e['message']}" for e in detail.get("errors", [])]
                detail = "\n".join(lines)
            raise click.ClickException(f"{path} failed ({resp.status_code}): {detail}")
        return resp.json()


def _write(text: str, out: str | None) -> None:
    if out is None or out == "-":
        click.echo(text, nl=False)
        return
    try:
        Path(out).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise click.ClickException(f"cannot write {out}: {exc.strerror or exc}") from exc


def _overrides(alpha0, beta, eta, tau, topk) -> dict:
    return {"alpha0": alpha0, "beta": beta, "eta": eta, "tau": tau, "top_k": topk}


def sage_options(fn):
    for name, kind, help_ in reversed((
        ("--alpha0", float, "static attention boost for shallow layers"),
        ("--beta", float, "FFN scale when the divergence gate fires"),
        ("--eta", float, "contrastive weight"),
        ("--tau", float, "divergence gate threshold (default: calibrated)"),
        ("--topk", int, "cells in the discrepancy mask"),
    )):
        fn = click.option(name, type=kind, default=None, help=help_)(fn)
    return fn


@click.group()
@click.version_option(__version__)
@click.option("--server", envvar="SAGEFAITH_SERVER", default=None,
              help="Service URL; omitted means run in-process.")
@click.pass_context
def main(ctx: click.Context, server: str | None) -> None:
    """Faithfulness metrics, interventions and probes on a toy multimodal transformer."""
    ctx.obj = Backend(server)


@main.command("eval")
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--judge", type=click.Choice(["rule", "remote"]), default="rule", show_default=True)
@click.option("--metrics", default="all", show_default=True, help="'all' or a comma list of dqr,ds,tf1,cf1,cr,drf")
@click.option("--out", default=None, help="report path (stdout when omitted)")
@click.option("--format", "fmt", type=click.Choice(["lines", "csv"]), default="lines", show_default=True)
@click.option("--workers", type=int, default=4, show_default=True)
@click.option("--cache-dir", default=None, help="remote judge response cache directory")
@click.pass_obj
def eval_cmd(backend: Backend, manifest, judge, metrics, out, fmt, workers, cache_dir) -> None:
    """Score manifest transcripts."""
    body = {"manifest": Path(manifest).read_text(encoding="utf-8"), "judge": judge,
            "metrics": metrics, "format": fmt, "workers": workers, "cache_dir": cache_dir}
    res = backend.post("/eval", body)
    for err in res["rejected"]:
        click.echo(f"warning: line {err['line']}: {err['message']}", err=True)
    _write(res["report"], out)


@main.command()
@click.option("--plan", "plan_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="JSON ablation plan (default plan when omitted)")
@click.option("--seed", type=int, default=None, help="first scene seed")
@click.option("--out", default=None)
@click.option("--format", "fmt", type=click.Choice(["lines", "csv"]), default="lines", show_default=True)
@sage_options
@click.pass_obj
def ablate(backend: Backend, plan_path, seed, out, fmt, alpha0, beta, eta, tau, topk) -> None:
    """Run stage ablations and parameter sweeps on seeded toy scenes."""
    plan = json.loads(Path(plan_path).read_text(encoding="utf-8")) if plan_path else {}
    res = backend.post("/ablate", {"plan": plan, "seed": seed, "format": fmt,
                                   "overrides": _overrides(alpha0, beta, eta, tau, topk)})
    for tag in res["failed"]:
        click.echo(f"warning: combination {tag} failed", err=True)
    _write(res["report"], out)


@main.command()
@click.option("--trace", "traces", multiple=True, required=True, type=click.Path(exists=True, dir_okay=False),
              help="trace file written by 'decode' (give two for --probe residual)")
@click.option("--probe", "kind", required=True,
              type=click.Choice(["tam", "alloc", "residual", "sublayer", "neuron"]))
@click.option("--out", default=None)
@click.pass_obj
def probe(backend: Backend, traces, kind, out) -> None:
    """Measure a recorded decode."""
    bundles = [json.loads(Path(t).read_text(encoding="utf-8")) for t in traces]
    _write(backend.post("/probe", {"probe": kind, "traces": bundles})["output"], out)


@main.command()
@click.option("--mode", required=True, type=click.Choice(["hint-explicit", "hint-implicit", "mask"]))
@click.option("--ratio", type=float, default=0.5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--prompt", default=None, help="comma-separated prompt token ids (hint modes)")
@click.option("--scene", "scene_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="scene JSON (mask mode); a seeded scene otherwise")
@click.option("--scene-seed", type=int, default=0, show_default=True)
@click.option("--out", default=None)
@click.pass_obj
def perturb(backend: Backend, mode, ratio, seed, prompt, scene_path, scene_seed, out) -> None:
    """Add a hint to a prompt or mask scene cells."""
    body = {"mode": mode, "ratio": ratio, "seed": seed, "scene_seed": scene_seed}
    if prompt:
        body["prompt"] = [int(t) for t in prompt.split(",")]
    if scene_path:
        body["scene"] = json.loads(Path(scene_path).read_text(encoding="utf-8"))
    res = backend.post("/perturb", body)
    payload = {"prompt": res["prompt"]} if mode.startswith("hint-") else {
        "masked_cells": res["masked_cells"], "scene": res["scene"]}
    _write(json.dumps(payload, sort_keys=True) + "\n", out)


@main.command()
@click.option("--scene-seed", type=int, default=0, show_default=True)
@click.option("--differences", type=int, default=1, show_default=True)
@click.option("--prompt", type=click.Choice(["same", "different", "count", "describe"]), default="describe",
              show_default=True)
@click.option("--hint", type=click.Choice(["none", "explicit", "implicit"]), default="none", show_default=True)
@click.option("--sage/--no-sage", default=False, show_default=True)
@click.option("--stages", default="I,II,III", show_default=True, help="enabled stages when --sage")
@click.option("--max-len", type=int, default=12, show_default=True)
@click.option("--out", default=None, help="write the trace bundle here")
@click.option("--sage-trace", default=None, help="write per-layer stage records here")
@sage_options
@click.pass_obj
def decode(backend: Backend, scene_seed, differences, prompt, hint, sage, stages, max_len, out,
           sage_trace, alpha0, beta, eta, tau, topk) -> None:
    """Decode one seeded scene and print the scripted transcript."""
    body = {"scene_seed": scene_seed, "n_differences": differences, "prompt": prompt, "hint": hint,
            "sage": sage, "stages": [s.strip() for s in stages.split(",") if s.strip()],
            "max_len": max_len, "overrides": _overrides(alpha0, beta, eta, tau, topk)}
    res = backend.post("/decode", body)
    click.echo(" ".join(res["token_names"]))
    click.echo(res["transcript"])
    if out:
        _write(json.dumps(res["bundle"]) + "\n", out)
    if sage_trace and res["sage_trace"] is not None:
        _write(res["sage_trace"], sage_trace)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(host: str, port: int) -> None:
    """Run the HTTP service."""
    import uvicorn

    uvicorn.run("sagefaith.api:app", host=host, port=port)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
