import hashlib
import hmac
import logging
import threading
from typing import Dict, List, Optional, Tuple

from fastapi import APIRouter, HTTPException, Query, Request, status
from fastapi.concurrency import run_in_threadpool
from fastapi.responses import Response

from src import config
from src.errors import MoEFedError, ProtocolError
from src.federation import FederationState, UpdatePackage, server_round
from src.harness import initial_model, resolve_budgets
from src.models import ExperimentConfig, RoundSummary
from src.wire import decode_package, encode_checkpoint

logger = logging.getLogger(__name__)

router = APIRouter()


class RoundError(Exception):
    def __init__(self, status_code: int, detail: str):
        super().__init__(detail)
        self.status_code = status_code
        self.detail = detail


class RoundCoordinator:
    """Collects one package per client per round and aggregates when all have arrived."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.state = FederationState(
            round=1, model=initial_model(cfg), budgets=resolve_budgets(cfg), policy=cfg.policy
        )
        self.pending: Dict[int, UpdatePackage] = {}
        self.summaries: List[RoundSummary] = []
        self._lock = threading.Lock()
        self._refresh()

    def _refresh(self) -> None:
        self._document = encode_checkpoint(self.state.model, self.state.round - 1)
        self._etag = f'"{hashlib.sha256(self._document).hexdigest()}"'

    @property
    def round(self) -> int:
        return self.state.round

    @property
    def finished(self) -> bool:
        return self.state.round > self.cfg.rounds

    def global_document(self) -> Tuple[bytes, str, int]:
        with self._lock:
            return self._document, self._etag, self.state.round

    def submit(self, round_index: int, body: bytes) -> Dict[str, int]:
        try:
            package = decode_package(body)
        except ProtocolError as exc:
            raise RoundError(400, str(exc)) from exc
        with self._lock:
            if round_index != self.state.round or package.round != round_index:
                raise RoundError(404, f"round {round_index} is not open (current round {self.state.round})")
            if self.finished:
                raise RoundError(409, "all rounds are complete")
            if not 0 <= package.client_id < self.cfg.clients:
                raise RoundError(400, f"unknown client {package.client_id}")
            if package.client_id in self.pending:
                raise RoundError(409, f"client {package.client_id} already uploaded for round {round_index}")
            self.pending[package.client_id] = package
            received = len(self.pending)
            logger.info(f"round {round_index}: package from client {package.client_id} ({received}/{self.cfg.clients})")
            if received == self.cfg.clients:
                self._close_round()
        return {"round": round_index, "received": received, "expected": self.cfg.clients}

    def _close_round(self) -> None:
        packages = [self.pending[c] for c in sorted(self.pending)]
        self.state = server_round(self.state, packages)
        if self.state.last_summary is not None:
            self.summaries.append(self.state.last_summary)
        self.pending = {}
        self._refresh()


coordinator: Optional[RoundCoordinator] = None


def configure(cfg: Optional[ExperimentConfig]) -> Optional[RoundCoordinator]:
    """Start (or clear, with None) the round coordinator served by this router."""
    global coordinator
    coordinator = RoundCoordinator(cfg) if cfg is not None else None
    if coordinator is not None:
        logger.info(f"coordinator ready: {cfg.clients} clients, {cfg.rounds} rounds")
    return coordinator


def _require_coordinator() -> RoundCoordinator:
    if coordinator is None:
        raise HTTPException(status_code=503, detail="No experiment configured")
    return coordinator


@router.get("/global")
def get_global_model(request: Request):
    """Current global checkpoint, with ETag caching support."""
    current = _require_coordinator()
    document, etag, round_index = current.global_document()
    headers = {"ETag": etag, "X-Round": str(round_index), "X-Rounds-Total": str(current.cfg.rounds)}
    if request.headers.get("If-None-Match") == etag:
        return Response(status_code=304, headers=headers)
    return Response(content=document, media_type="application/json", headers=headers)


@router.post("/rounds/{round_index}/packages", status_code=status.HTTP_202_ACCEPTED)
async def upload_package(round_index: int, request: Request):
    """Accept one signed update package for the open round."""
    body = await request.body()

    signature = request.headers.get("X-Package-Signature-256")
    if not signature:
        raise HTTPException(status_code=401, detail="Missing signature")
    try:
        config._validate_config()
    except ValueError as exc:
        logger.error(f"cannot verify uploads: {exc}")
        raise HTTPException(status_code=503, detail="Package secret not configured")
    if not _verify_signature(body, signature):
        raise HTTPException(status_code=401, detail="Invalid signature")

    current = _require_coordinator()
    try:
        return await run_in_threadpool(current.submit, round_index, body)
    except RoundError as exc:
        raise HTTPException(status_code=exc.status_code, detail=exc.detail)
    except MoEFedError as exc:
        logger.error(f"round {round_index}: aggregation failed: {exc}")
        raise HTTPException(status_code=500, detail=f"Aggregation failed: {exc}")


@router.get("/rounds")
async def get_round_summaries(limit: int = Query(50, gt=0, description="Number of recent rounds")):
    """Summaries of the last N aggregated rounds."""
    current = _require_coordinator()
    return [s.model_dump() for s in current.summaries[-limit:]]


def _verify_signature(body: bytes, signature: str) -> bool:
    """Check the sha256 HMAC of an uploaded package against the shared secret."""
    if not signature.startswith("sha256="):
        return False
    expected = config.sign_body(body, config.PACKAGE_SECRET)
    return hmac.compare_digest(signature, expected)
