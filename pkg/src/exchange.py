"""httpx client for running a federated client in its own process."""
import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import httpx

from src import config
from src.data import generate_clients
from src.errors import ProtocolError
from src.federation import ClientRoundResult, ClientState, LocalTrainingConfig, UpdatePackage, client_round
from src.harness import resolve_budgets
from src.models import ExperimentConfig
from src.moe import MoEModel
from src.wire import decode_checkpoint, encode_package

logger = logging.getLogger(__name__)


@dataclass
class GlobalSnapshot:
    model: MoEModel
    round: int
    etag: Optional[str]
    rounds_total: Optional[int] = None


def _handle_response(response: httpx.Response) -> None:
    """Map server status codes to errors."""
    if response.status_code < 400:
        return
    try:
        detail = response.json().get("detail", response.text)
    except ValueError:
        detail = response.text
    if response.status_code == 401:
        raise ProtocolError(f"signature rejected: {detail}")
    if response.status_code in (400, 422):
        raise ProtocolError(f"package rejected: {detail}")
    if response.status_code in (404, 409):
        raise ProtocolError(f"round conflict: {detail}")
    if response.status_code == 503:
        raise ProtocolError("server has no experiment configured")
    raise ProtocolError(f"upstream failure ({response.status_code}): {detail}")


class ExchangeClient:
    def __init__(self, base_url: Optional[str] = None, timeout: float = 30.0, client: Optional[httpx.Client] = None):
        self.base_url = (base_url or config.SERVER_URL).rstrip("/")
        self._client = client or httpx.Client(base_url=self.base_url, timeout=timeout)

    def __enter__(self) -> "ExchangeClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        self._client.close()

    def fetch_global(self, etag: Optional[str] = None) -> Optional[GlobalSnapshot]:
        """Download the global checkpoint; None when it still matches `etag`."""
        headers: Dict[str, str] = {"If-None-Match": etag} if etag else {}
        response = self._client.get("/global", headers=headers)
        if response.status_code == 304:
            return None
        _handle_response(response)
        model, _ = decode_checkpoint(response.content)
        try:
            round_index = int(response.headers["X-Round"])
        except (KeyError, ValueError) as exc:
            raise ProtocolError("global model response has no valid X-Round header") from exc
        total = response.headers.get("X-Rounds-Total")
        return GlobalSnapshot(
            model=model,
            round=round_index,
            etag=response.headers.get("ETag"),
            rounds_total=int(total) if total else None,
        )

    def upload_package(self, package: UpdatePackage) -> dict:
        body = encode_package(package)
        response = self._client.post(
            f"/rounds/{package.round}/packages", content=body, headers=config.package_headers(body)
        )
        _handle_response(response)
        logger.info(f"client {package.client_id}: uploaded round {package.round} ({len(body)} bytes)")
        return response.json()


def run_remote_client(
    cfg: ExperimentConfig,
    client_id: int,
    exchange: ExchangeClient,
    rounds: Optional[int] = None,
    poll_interval: float = 1.0,
    sleep: Callable[[float], None] = time.sleep,
) -> List[ClientRoundResult]:
    """Download, train and upload for `rounds` rounds (default: all configured rounds)."""
    if not 0 <= client_id < cfg.clients:
        raise ProtocolError(f"client id {client_id} outside 0..{cfg.clients - 1}")
    dataset = generate_clients(cfg.data, cfg.clients, cfg.seed)[client_id]
    state = ClientState(client_id=client_id, dataset=dataset, budget=resolve_budgets(cfg)[client_id])
    train_cfg = LocalTrainingConfig.from_experiment(cfg)
    rounds = cfg.rounds if rounds is None else rounds

    snapshot = exchange.fetch_global()
    results: List[ClientRoundResult] = []
    while len(results) < rounds:
        total = snapshot.rounds_total if snapshot.rounds_total is not None else cfg.rounds
        if snapshot.round > total:
            logger.info(f"client {client_id}: server finished all {total} rounds")
            break
        result = client_round(state, snapshot.model, train_cfg, snapshot.round)
        exchange.upload_package(result.package)
        results.append(result)
        if len(results) == rounds:
            break
        current = snapshot.round
        while True:
            sleep(poll_interval)
            fresh = exchange.fetch_global(etag=snapshot.etag)
            if fresh is not None and fresh.round > current:
                snapshot = fresh
                break
    return results
