"""
Main API Router - STAND Logit Server
Combines all API endpoints into a single router
"""

from fastapi import APIRouter

from app.api.v1.next_dist import next_dist_router

# Create main API router
api_router = APIRouter()

api_router.include_router(next_dist_router)
