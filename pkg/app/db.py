from functools import lru_cache
from pathlib import Path

from sqlalchemy.engine import Engine
from sqlmodel import Session, SQLModel, create_engine

from .settings import registry_url


@lru_cache(maxsize=None)
def _engine_for(url: str) -> Engine:
    connect_args = {"check_same_thread": False} if url.startswith("sqlite") else {}
    if url.startswith("sqlite:///"):
        Path(url[len("sqlite:///"):]).parent.mkdir(parents=True, exist_ok=True)
    engine = create_engine(url, echo=False, connect_args=connect_args)
    SQLModel.metadata.create_all(engine)
    return engine


def get_engine() -> Engine:
    # Resolved per call so a changed SINOGUIDE_REGISTRY_URL takes effect.
    from . import models  # noqa: F401  (registers the tables)

    return _engine_for(registry_url())


def get_session() -> Session:
    return Session(get_engine())
