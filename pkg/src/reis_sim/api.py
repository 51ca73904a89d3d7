"""Device-level command surface.

Host commands use vendor-specific opcodes; the flash command enum names the
operations a search issues to the NAND dies, which trace events carry.
"""

from __future__ import annotations

import enum
from dataclasses import replace

import numpy as np

from .engine import SearchParams, nprobe_for_target, search_batch
from .ivf import IvfIndex
from .layout import DeployedDatabase, deploy_flat, deploy_ivf, pack_rdb
from .ssd import SsdConfig, preset
from .vectors import QuantizerModel


class Opcode(enum.IntEnum):
    DB_DEPLOY = 0x80
    IVF_DEPLOY = 0x81
    SEARCH = 0x82
    IVF_SEARCH = 0x83


class FlashCommand(enum.Enum):
    IBC = "IBC"  # broadcast Q_EMB into every page buffer
    READ = "READ"
    XOR = "XOR"  # XOR the sensed page with the cache latch
    GEN_DIST = "GEN_DIST"  # fail-bit count of one Mini-Page
    RD_TTL = "RD_TTL"  # move a passing entry to the controller DRAM


class UnknownDatabaseError(KeyError):
    pass


class ReisDevice:
    """One modeled SSD holding any number of deployed databases.

    Databases are placed back to back; the R-DB table maps ``db_id`` to
    each one's region bounds.
    """

    def __init__(self, config: SsdConfig | None = None):
        self.config = config or preset("reis-ssd1")
        self.databases: dict[int, DeployedDatabase] = {}
        self._next_free = 0

    def _check_new(self, db_id: int):
        if db_id in self.databases:
            raise ValueError(f"database {db_id} is already deployed")

    def _register(self, db: DeployedDatabase) -> DeployedDatabase:
        self.databases[db.db_id] = db
        self._next_free = db.end_address
        return db

    def db_deploy(self, vectors, documents, db_id: int, quantizer: QuantizerModel, n=None, **kw):
        self._check_new(db_id)
        if n is not None and n != len(vectors):
            raise ValueError(f"N={n} but {len(vectors)} vectors supplied")
        db = deploy_flat(vectors, documents, quantizer, self.config, db_id=db_id, start_address=self._next_free, **kw)
        return self._register(db)

    def ivf_deploy(self, vectors, documents, db_id: int, index: IvfIndex, quantizer: QuantizerModel, n=None, **kw):
        self._check_new(db_id)
        if n is not None and n != len(vectors):
            raise ValueError(f"N={n} but {len(vectors)} vectors supplied")
        db = deploy_ivf(
            vectors, documents, index, quantizer, self.config, db_id=db_id, start_address=self._next_free, **kw
        )
        return self._register(db)

    def database(self, db_id: int) -> DeployedDatabase:
        try:
            return self.databases[db_id]
        except KeyError:
            raise UnknownDatabaseError(f"no database with id {db_id}") from None

    def search(self, queries, query_ids, db_id: int, k: int, params: SearchParams | None = None):
        """Top-k for a batch; returns ``{query_id: SearchResult}``."""
        db = self.database(db_id)
        params = replace(params or SearchParams(), k=k)
        q = np.atleast_2d(np.asarray(queries, dtype=np.float32))
        if len(query_ids) != q.shape[0]:
            raise ValueError("one query id per query is required")
        return dict(zip(query_ids, search_batch(q, db, params)))

    def ivf_search(self, queries, query_ids, db_id: int, k: int, target_recall: float, params=None):
        """IVF top-k with nprobe taken from the database's calibration table."""
        db = self.database(db_id)
        if not db.is_ivf:
            raise ValueError(f"database {db_id} is not an IVF deployment")
        params = replace(params or SearchParams(), nprobe=nprobe_for_target(db, target_recall))
        return self.search(queries, query_ids, db_id, k, params)

    def rdb_table(self) -> bytes:
        """Packed R-DB records of all databases, by id."""
        return b"".join(pack_rdb(self.databases[i].rdb) for i in sorted(self.databases))

    def submit(self, opcode: int, **kwargs):
        """Dispatch a host command by opcode."""
        op = Opcode(opcode)
        handler = {
            Opcode.DB_DEPLOY: self.db_deploy,
            Opcode.IVF_DEPLOY: self.ivf_deploy,
            Opcode.SEARCH: self.search,
            Opcode.IVF_SEARCH: self.ivf_search,
        }[op]
        return handler(**kwargs)
