"""HTTP service over the core package.

Every endpoint takes and returns JSON; report bodies are returned as text
exactly as they would be written to disk, so a client only has to save them.
"""

from __future__ import annotations

from typing import Any, Literal, Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__, harness, toymm
from .judge import JudgeClient, JudgeConfigError, JudgeError, JudgeSettings, RemoteJudge, RuleJudge
from .sage import SageConfig, sage_decode

PROMPT_NAMES = {"same": toymm.Q_SAME, "different": toymm.Q_DIFF,
                "count": toymm.Q_COUNT, "describe": toymm.Q_DESCRIBE}


class SageOverrides(BaseModel):
    alpha0: Optional[float] = None
    beta: Optional[float] = None
    eta: Optional[float] = None
    tau: Optional[float] = None
    top_k: Optional[int] = None

    def fields(self) -> dict[str, Any]:
        return {k: v for k, v in self.model_dump().items() if v is not None}


class EvalRequest(BaseModel):
    manifest: str = Field(description="line-delimited manifest records")
    judge: Literal["rule", "remote"] = "rule"
    metrics: str = "all"
    format: Literal["lines", "csv"] = "lines"
    workers: int = Field(4, ge=1, le=64)
    cache_dir: Optional[str] = None


class LineError(BaseModel):
    line: int
    message: str


class EvalResponse(BaseModel):
    report: str
    n_records: int
    rejected: list[LineError]
    aggregates: dict[str, dict[str, Any]]
    judge: str


class AblateRequest(BaseModel):
    plan: dict[str, Any] = Field(default_factory=dict)
    seed: Optional[int] = None
    format: Literal["lines", "csv"] = "lines"
    overrides: SageOverrides = Field(default_factory=SageOverrides)


class AblateResponse(BaseModel):
    report: str
    n_rows: int
    failed: list[str]


class ProbeRequest(BaseModel):
    probe: Literal["tam", "alloc", "residual", "sublayer", "neuron"]
    traces: list[dict[str, Any]]


class ProbeResponse(BaseModel):
    output: str


class PerturbRequest(BaseModel):
    mode: Literal["hint-explicit", "hint-implicit", "mask"]
    ratio: float = 0.5
    seed: int = 0
    prompt: Optional[list[int]] = None
    scene: Optional[dict[str, Any]] = None
    scene_seed: int = 0


class PerturbResponse(BaseModel):
    prompt: Optional[list[int]] = None
    scene: Optional[dict[str, Any]] = None
    masked_cells: Optional[int] = None


class DecodeRequest(BaseModel):
    scene_seed: int = 0
    n_differences: int = Field(1, ge=1)
    scene: Optional[dict[str, Any]] = None
    prompt: Literal["same", "different", "count", "describe"] = "describe"
    hint: Literal["none", "explicit", "implicit"] = "none"
    sage: bool = False
    stages: list[Literal["I", "II", "III"]] = Field(default_factory=lambda: ["I", "II", "III"])
    overrides: SageOverrides = Field(default_factory=SageOverrides)
    max_len: int = Field(12, ge=1)
    model: dict[str, Any] = Field(default_factory=dict)


class DecodeResponse(BaseModel):
    tokens: list[int]
    token_names: list[str]
    transcript: str
    bundle: dict[str, Any]
    sage_trace: Optional[str] = None


def _bad(exc: Exception, status: int = 422) -> HTTPException:
    return HTTPException(status_code=status, detail=str(exc))


def _judge(kind: str, cache_dir: str | None):
    if kind == "rule":
        return RuleJudge()
    return RemoteJudge(JudgeClient(JudgeSettings.from_env(cache_dir)))


def create_app() -> FastAPI:
    app = FastAPI(title="sagefaith", version=__version__)

    @app.get("/health")
    def health() -> dict[str, str]:
        return {"status": "ok", "version": __version__}

    @app.post("/eval", response_model=EvalResponse)
    def evaluate(req: EvalRequest) -> EvalResponse:
        try:
            records, errors = harness.parse_manifest(req.manifest)
            judge = _judge(req.judge, req.cache_dir)
        except harness.ManifestError as exc:
            raise HTTPException(422, {"message": str(exc),
                                      "errors": [{"line": l, "message": m} for l, m in exc.errors]})
        except JudgeConfigError as exc:
            raise _bad(exc, 400)
        try:
            report = harness.evaluate_records(records, judge, req.metrics, req.workers)
        except harness.HarnessError as exc:
            raise _bad(exc)
        except JudgeError as exc:
            raise _bad(exc, 502)
        finally:
            if isinstance(judge, RemoteJudge):
                judge.client.close()
        aggregates = {s or "all": report.aggregate(s) for s in report.splits() + [None]}
        return EvalResponse(report=harness.render_report(report, req.format), n_records=len(records),
                            rejected=[LineError(line=l, message=m) for l, m in errors],
                            aggregates=aggregates, judge=report.judge)

    @app.post("/ablate", response_model=AblateResponse)
    def ablate(req: AblateRequest) -> AblateResponse:
        try:
            plan = harness.AblationPlan.from_dict(req.plan)
            if req.seed is not None:
                plan.seed = req.seed
            report = harness.run_ablation(plan, req.overrides.fields())
        except (harness.HarnessError, toymm.ConfigError, TypeError, ValueError) as exc:
            raise _bad(exc)
        failed = [r["tag"] for r in report.rows if r["status"] != "ok"]
        return AblateResponse(report=harness.render_report(report, req.format),
                              n_rows=len(report.rows), failed=failed)

    @app.post("/probe", response_model=ProbeResponse)
    def probe(req: ProbeRequest) -> ProbeResponse:
        try:
            return ProbeResponse(output=harness.probe_report(req.probe, req.traces))
        except (harness.HarnessError, ValueError) as exc:
            raise _bad(exc)

    @app.post("/perturb", response_model=PerturbResponse)
    def perturb(req: PerturbRequest) -> PerturbResponse:
        try:
            if req.mode.startswith("hint-"):
                prompt = req.prompt if req.prompt is not None else [toymm.Q_DESCRIBE]
                return PerturbResponse(prompt=harness.perturb_hint(prompt, req.mode[5:]))
            scene = (toymm.ScenePair.from_dict(req.scene) if req.scene is not None
                     else toymm.make_scene(req.scene_seed))
            masked = harness.perturb_mask(scene, req.ratio, req.seed)
            return PerturbResponse(scene=masked.to_dict(),
                                   masked_cells=harness.masked_count(req.ratio, scene.n_cells))
        except (harness.HarnessError, ValueError, KeyError) as exc:
            raise _bad(exc)

    @app.post("/decode", response_model=DecodeResponse)
    def decode(req: DecodeRequest) -> DecodeResponse:
        try:
            cfg = toymm.ModelConfig(**req.model)
            params = toymm.build_model(cfg)
            scene = (toymm.ScenePair.from_dict(req.scene) if req.scene is not None
                     else toymm.make_scene(req.scene_seed, cfg.grid_h, cfg.grid_w, req.n_differences))
            prompt = harness.perturb_hint([PROMPT_NAMES[req.prompt]], req.hint)
            sage_text = None
            if req.sage:
                config = SageConfig(**req.overrides.fields(), see="I" in req.stages,
                                    analyze="II" in req.stages, generate="III" in req.stages)
                tokens, trace, strace = sage_decode(params, scene, prompt, config, req.max_len)
                sage_text = strace.to_text()
            else:
                tokens, trace = toymm.greedy_decode(params, scene, prompt, None, req.max_len)
        except (toymm.ConfigError, toymm.DecodeError, TypeError, ValueError) as exc:
            raise _bad(exc)
        return DecodeResponse(tokens=tokens, token_names=[toymm.token_name(t) for t in tokens],
                              transcript=harness.scripted_transcript(tokens),
                              bundle=harness.trace_bundle(cfg, prompt, tokens, trace),
                              sage_trace=sage_text)

    return app


app = create_app()
