"""
Issue filing
Builds the regression issue payload and POSTs it to a generic webhook.
"""

from __future__ import annotations

import logging
from typing import List, Optional, Sequence

import requests
from pydantic import BaseModel, ConfigDict, Field

from .bisection import BisectionSession
from .errors import WebhookError
from .regression import DetectionReport
from .reports import render_nightly_markdown

logger = logging.getLogger(__name__)

DEFAULT_LABELS = ("performance", "regression")
WEBHOOK_TIMEOUT_S = 30


class IssuePayload(BaseModel):
    model_config = ConfigDict(frozen=True)

    title: str = Field(min_length=1)
    body: str
    labels: List[str] = Field(default_factory=lambda: list(DEFAULT_LABELS))
    culprit: Optional[str] = None


def build_issue_payload(
    nightly_commit: str,
    report: DetectionReport,
    sessions: Sequence[BisectionSession] = (),
    baseline_commit: Optional[str] = None,
) -> IssuePayload:
    culprits = [s.culprit for s in sessions if s.culprit]
    culprit = culprits[0] if culprits else None

    cells = report.flagged_cells()
    title = f"Performance regression in nightly {nightly_commit}: {len(report.findings)} finding(s) in {len(cells)} cell(s)"
    if culprit:
        title += f", culprit {culprit}"

    body = render_nightly_markdown(
        nightly_commit=nightly_commit,
        report=report,
        sessions=sessions,
        baseline_commit=baseline_commit,
    )
    return IssuePayload(title=title, body=body, culprit=culprit)


def file_issue(url: str, payload: IssuePayload, token: Optional[str] = None) -> int:
    """POST the payload; any 2xx means filed. Returns the HTTP status code."""
    headers = {"Content-Type": "application/json"}
    if token:
        headers["Authorization"] = f"Bearer {token}"

    try:
        response = requests.post(url, json=payload.model_dump(), headers=headers, timeout=WEBHOOK_TIMEOUT_S)
    except requests.RequestException as exc:
        raise WebhookError(f"Webhook {url} unreachable: {exc}") from exc

    if not 200 <= response.status_code < 300:
        raise WebhookError(
            f"Webhook {url} answered {response.status_code}: {response.text[:300]}",
            status_code=response.status_code,
        )
    logger.info("Issue filed via %s (%d)", url, response.status_code)
    return response.status_code
