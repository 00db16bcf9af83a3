"""Sessions and JSON requests for the chat and embedding backends."""

import logging
from typing import Any

import requests
from requests.adapters import HTTPAdapter
from urllib3.util.retry import Retry

from .errors import BackendError

logger = logging.getLogger(__name__)

RETRY_STATUSES = frozenset({429, 500, 502, 503, 504})


def create_session(
    api_key: str | None = None,
    *,
    max_retries: int = 3,
    backoff_factor: float = 1.0,
    backoff_jitter: float = 0.0,
    pool_maxsize: int = 20,
) -> requests.Session:
    """Create a JSON session for a model server.

    Both endpoints are POST-only and side-effect free, so POST is retried on
    connection errors and on 429/5xx with exponential backoff.

    Args:
        api_key: Bearer token, if the server requires one
        max_retries: Retries for transient failures
        backoff_factor: Exponential backoff base in seconds
        backoff_jitter: Random jitter added to each backoff sleep
        pool_maxsize: Connections kept per host; should cover max_in_flight

    Returns:
        Configured requests.Session instance
    """
    retry_strategy = Retry(
        total=max_retries,
        status_forcelist=sorted(RETRY_STATUSES),
        allowed_methods={"POST"},
        backoff_factor=backoff_factor,
        backoff_jitter=backoff_jitter,
        raise_on_status=False,
    )
    adapter = HTTPAdapter(max_retries=retry_strategy, pool_maxsize=pool_maxsize)

    session = requests.Session()
    session.mount("http://", adapter)
    session.mount("https://", adapter)
    session.headers.update({"Content-Type": "application/json"})
    if api_key:
        session.headers.update({"Authorization": f"Bearer {api_key}"})
    return session


def request_json(session: requests.Session, method: str, url: str, stage: str | None, **kwargs: Any) -> Any:
    """Send a request and decode its JSON body, mapping failures to BackendError.

    Retries happen inside the session's adapter; a retryable status that is
    still failing here has exhausted them.
    """
    try:
        response = session.request(method, url, **kwargs)
    except requests.RequestException as e:
        logger.error(f"Request to {url} failed: {e}")
        raise BackendError(f"request to {url} failed: {e}", stage=stage, retryable=True) from e

    if response.status_code >= 400:
        retryable = response.status_code in RETRY_STATUSES
        detail = response.text[:200] if response.text else response.reason
        logger.error(f"Request to {url} returned {response.status_code}")
        raise BackendError(
            f"{url} returned HTTP {response.status_code}"
            f"{' after retries' if retryable else ''}: {detail}",
            stage=stage,
            retryable=retryable,
        )
    try:
        return response.json()
    except ValueError as e:
        raise BackendError(f"{url} returned a non-JSON body", stage=stage) from e
