"""
Next-Token Distribution Routes
Serves a local target model over the remote logit-server protocol
"""

from fastapi import APIRouter, Depends, HTTPException, Request, status
import logging

from app.ai.client import sparsify
from app.core.exceptions import InputError
from app.models.base import TargetModel
from app.schemas import NextDistRequest, NextDistResponse
from app.utils.sampling import apply_temperature

logger = logging.getLogger(__name__)


# ============================================================================
# NEXT DIST ROUTER
# ============================================================================

next_dist_router = APIRouter(tags=["Target Model"])


def get_target(request: Request) -> TargetModel:
    """Get the target model attached to the app"""
    target = getattr(request.app.state, "target", None)
    if target is None:
        raise HTTPException(status_code=status.HTTP_503_SERVICE_UNAVAILABLE, detail="No target model loaded")
    return target


@next_dist_router.post("/next_dist", response_model=NextDistResponse)
def next_dist(body: NextDistRequest, target: TargetModel = Depends(get_target)):
    """
    Next-token distribution after `context` at the requested temperature.

    Zero-probability tokens are omitted from the response.
    """
    try:
        target.validate_context(body.context)
    except InputError as e:
        raise HTTPException(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail=str(e))
    if body.temperature == target.temperature:
        probs = target.next_distribution(body.context)
    else:
        probs = apply_temperature(target.base_distribution(body.context), body.temperature)
    ids, values = sparsify(probs)
    return NextDistResponse(vocab_size=target.vocab_size, ids=ids, probs=values)
