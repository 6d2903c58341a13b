"""Request and response models for the HTTP service."""
from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field


class ParamsModel(BaseModel):
    gamma: int = Field(ge=1)
    n: int = 5
    m: int = 2000
    k: int = 5
    tr: int = 3
    dim: int = 512
    scalar_range: tuple[float, float] = (0.5, 2.0)
    noise_delta: float = 0.05
    hash_version: int = 1
    combination_budget: int = 10**6


class KeygenRequest(BaseModel):
    gamma: int = Field(ge=1)
    n: int = Field(default=5, ge=1)
    k: Optional[int] = None
    dim: int = Field(default=512, ge=2)
    m: Optional[int] = None
    tr: int = Field(default=3, ge=1)


class WorkFactor(BaseModel):
    paper_bits: float
    refined_bits: float
    attack_bits: float
    total_candidates: int
    expected_tries: float


class KeygenResponse(BaseModel):
    params: ParamsModel
    work_factor: WorkFactor


class ChaffSpec(BaseModel):
    """Synthetic chaff from a population's face manifold, or explicit vectors per channel."""

    mode: Literal["synthetic", "vectors"] = "synthetic"
    population: Optional[dict] = None
    vectors: Optional[list[list[list[float]]]] = None


class EnrollRequest(BaseModel):
    params: ParamsModel
    template: list[list[float]]
    chaff: ChaffSpec = ChaffSpec()
    seed: Optional[int] = None


class EnrollResponse(BaseModel):
    helper: str = Field(description="base64 of the .mvot container")
    size: int
    commitments: int


class VerifyRequest(BaseModel):
    helper: str
    query: list[list[float]]
    tr: Optional[int] = Field(default=None, ge=1)


class VerifyResponse(BaseModel):
    accepted: bool
    matched_subset: Optional[list[int]]
    matched_ranks: Optional[list[int]]
    candidates: list[list[int]]
    top_scores: list[float]
    hash_count: int
    tr: int


class AttackRequest(BaseModel):
    helper: str
    budget: int = Field(default=2**24, ge=1)
    seed: Optional[int] = None


class AttackResponse(BaseModel):
    tries_to_success: int
    succeeded: bool
    wall_time: float
    total_candidates: int


class Problem(BaseModel):
    detail: str
