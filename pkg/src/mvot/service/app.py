"""HTTP front end over keygen / enroll / verify / attack.

Helpers travel as base64 of the binary container so that the bytes a
client stores are the bytes that were hashed.
"""
from __future__ import annotations

import base64
import binascii
import dataclasses

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import __version__
from ..container import HelperFormatError, deserialize_helper, serialize_helper
from ..embedding import EmbeddingError
from ..security import AttackBudgetError, brute_force_attack, work_factor
from ..sources import (ChaffSource, ChannelSet, EmbeddingTable, PopulationSpec, SourceError,
                       sample_population)
from ..vault import EnrollError, ParamsError, ProtocolParams, VerifyError, enroll, keygen, verify
from .schemas import (AttackRequest, AttackResponse, EnrollRequest, EnrollResponse,
                      KeygenRequest, KeygenResponse, ParamsModel, Problem, VerifyRequest,
                      VerifyResponse, WorkFactor)

app = FastAPI(title="mvot", version=__version__)

_BAD_INPUT = (ParamsError, EnrollError, VerifyError, SourceError, EmbeddingError)


def _decode_helper(b64: str):
    try:
        return deserialize_helper(base64.b64decode(b64, validate=True))
    except (binascii.Error, HelperFormatError) as e:
        raise HTTPException(status_code=400, detail=f"bad helper: {e}") from e


def _channels(rows) -> ChannelSet:
    try:
        return ChannelSet.of(rows)
    except (EmbeddingError, SourceError) as e:
        raise HTTPException(status_code=400, detail=str(e)) from e


def _chaff_source(req: EnrollRequest, params: ProtocolParams) -> ChaffSource:
    spec = req.chaff
    if spec.mode == "synthetic":
        pop = dict(spec.population or {})
        pop.update(dim=params.dim, n_channels=params.n)
        pop.setdefault("num_identities", 1)
        return sample_population(PopulationSpec.from_dict(pop)).chaff_source()
    if not spec.vectors or len(spec.vectors) != params.n:
        raise HTTPException(status_code=400,
                            detail=f"vector chaff needs one list per channel ({params.n})")
    table = EmbeddingTable(params.dim)
    for ch, rows in enumerate(spec.vectors):
        for j, row in enumerate(rows):
            table.add(f"chaff{j}", ch, row)
    return ChaffSource("file", params.dim, table=table)


@app.get("/health")
def health():
    return {"status": "ok", "version": __version__}


@app.post("/keygen", response_model=KeygenResponse, responses={400: {"model": Problem}})
def keygen_endpoint(req: KeygenRequest):
    try:
        params = keygen(req.gamma, req.n, req.k, req.dim, m=req.m, tr=req.tr)
    except ParamsError as e:
        raise HTTPException(status_code=400, detail=str(e)) from e
    wf = work_factor(params)
    return KeygenResponse(params=ParamsModel(**params.to_dict()),
                          work_factor=WorkFactor(**dataclasses.asdict(wf)))


@app.post("/enroll", response_model=EnrollResponse, responses={400: {"model": Problem}})
def enroll_endpoint(req: EnrollRequest):
    try:
        params = ProtocolParams.from_dict(req.params.model_dump())
        template = _channels(req.template)
        chaff = _chaff_source(req, params)
        rng = np.random.default_rng(req.seed)
        helper = enroll(template, chaff, params, rng)
    except _BAD_INPUT as e:
        raise HTTPException(status_code=400, detail=str(e)) from e
    blob = serialize_helper(helper)
    return EnrollResponse(helper=base64.b64encode(blob).decode("ascii"), size=len(blob),
                          commitments=len(helper.commitments))


@app.post("/verify", response_model=VerifyResponse, responses={400: {"model": Problem}})
def verify_endpoint(req: VerifyRequest):
    helper = _decode_helper(req.helper)
    try:
        result = verify(helper, _channels(req.query), req.tr)
    except _BAD_INPUT as e:
        raise HTTPException(status_code=400, detail=str(e)) from e
    return VerifyResponse(**result.to_dict())


@app.post("/attack", response_model=AttackResponse, responses={409: {"model": Problem}})
def attack_endpoint(req: AttackRequest):
    helper = _decode_helper(req.helper)
    try:
        result = brute_force_attack(helper, np.random.default_rng(req.seed), req.budget)
    except AttackBudgetError as e:
        raise HTTPException(status_code=409, detail=str(e)) from e
    return AttackResponse(**dataclasses.asdict(result))
