"""Thin HTTP client used by the CLI's ``--server`` mode."""
from __future__ import annotations

import base64

import httpx


class ServiceError(RuntimeError):
    def __init__(self, status: int, detail: str):
        super().__init__(f"service returned {status}: {detail}")
        self.status = status
        self.detail = detail


class ServiceClient:
    def __init__(self, base_url: str = "", timeout: float = 120.0, transport=None,
                 http: httpx.Client | None = None):
        # ``http`` accepts a ready-made client, e.g. a test client bound to the app
        self._http = http or httpx.Client(base_url=base_url, timeout=timeout, transport=transport)

    def _post(self, path: str, payload: dict) -> dict:
        resp = self._http.post(path, json=payload)
        if resp.status_code != 200:
            try:
                detail = resp.json().get("detail", resp.text)
            except ValueError:
                detail = resp.text
            raise ServiceError(resp.status_code, str(detail))
        return resp.json()

    def keygen(self, **fields) -> dict:
        return self._post("/keygen", fields)

    def enroll(self, params: dict, template, chaff: dict, seed=None) -> bytes:
        body = self._post("/enroll", {
            "params": params,
            "template": [list(map(float, v)) for v in template],
            "chaff": chaff,
            "seed": seed,
        })
        return base64.b64decode(body["helper"])

    def verify(self, helper: bytes, query, tr=None) -> dict:
        return self._post("/verify", {
            "helper": base64.b64encode(helper).decode("ascii"),
            "query": [list(map(float, v)) for v in query],
            "tr": tr,
        })

    def attack(self, helper: bytes, budget: int, seed=None) -> dict:
        return self._post("/attack", {
            "helper": base64.b64encode(helper).decode("ascii"),
            "budget": budget,
            "seed": seed,
        })

    def close(self):
        self._http.close()
