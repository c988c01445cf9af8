import os
import sys
from dotenv import load_dotenv
from pydantic_settings import BaseSettings
from typing import Optional
from loguru import logger

load_dotenv()

class Settings(BaseSettings):
    PROJECT_NAME: str = "coalflow"
    VERSION: str = "0.1.0"
    SCHEMA_VERSION: str = "1"

    # Logging
    LOG_LEVEL: str = "INFO"
    LOGS_DIR: Optional[str] = None
    LOG_JSON: bool = False

    # Reproducibility: unconfigured runs use a fixed seed, never the clock
    DEFAULT_SEED: int = 20240601
    DEFAULT_SAMPLES: int = 1000

    # Geometry
    CROSSING_TOL: float = 1e-9
    HAUSDORFF_MESH_FRACTION: float = 1e-2

    # Resource guards
    MAX_PARTICLE_STEPS: int = 2_000_000_000
    MAX_GASKET_TRIANGLES: int = 3 ** 12

    # Noise field
    NOISE_BLOCK_ROWS: int = 256

    # Replica execution
    WORKER_PROCESSES: int = os.cpu_count() or 1
    REPLICA_CHUNK: int = 64

    # Storage
    OUTPUT_DIR: str = "./results"

    class Config:
        env_file = ".env"
        env_file_encoding = "utf-8"
        extra = "ignore"

    def __init__(self, **kwargs):
        super().__init__(**kwargs)
        self._validate_and_warn()

    def _validate_and_warn(self):
        """Warn about settings that are legal but almost certainly unintended"""
        if self.WORKER_PROCESSES < 1:
            logger.warning(f"WORKER_PROCESSES={self.WORKER_PROCESSES}; falling back to a single worker")
            self.WORKER_PROCESSES = 1
        if self.NOISE_BLOCK_ROWS < 1:
            logger.warning(f"NOISE_BLOCK_ROWS={self.NOISE_BLOCK_ROWS}; using 1")
            self.NOISE_BLOCK_ROWS = 1
        if self.CROSSING_TOL < 0:
            logger.warning(f"CROSSING_TOL={self.CROSSING_TOL} is negative; using 0")
            self.CROSSING_TOL = 0.0
        if self.HAUSDORFF_MESH_FRACTION <= 0 or self.HAUSDORFF_MESH_FRACTION > 1:
            logger.warning(f"HAUSDORFF_MESH_FRACTION={self.HAUSDORFF_MESH_FRACTION} outside (0, 1]; using 1e-2")
            self.HAUSDORFF_MESH_FRACTION = 1e-2

    def describe(self) -> dict:
        """Effective configuration, as embedded in reports and logged at startup"""
        return {
            "version": self.VERSION,
            "schema_version": self.SCHEMA_VERSION,
            "crossing_tol": self.CROSSING_TOL,
            "hausdorff_mesh_fraction": self.HAUSDORFF_MESH_FRACTION,
            "max_particle_steps": self.MAX_PARTICLE_STEPS,
            "max_gasket_triangles": self.MAX_GASKET_TRIANGLES,
            "noise_block_rows": self.NOISE_BLOCK_ROWS,
            "worker_processes": self.WORKER_PROCESSES,
        }


def configure_logging(level: Optional[str] = None, quiet: bool = False):
    """Install the stderr sink and, when LOGS_DIR is set, a rotating file sink"""
    logger.remove()
    stderr_level = "WARNING" if quiet else (level or settings.LOG_LEVEL)
    logger.add(sys.stderr, level=stderr_level, serialize=settings.LOG_JSON)
    if settings.LOGS_DIR:
        os.makedirs(settings.LOGS_DIR, exist_ok=True)
        logger.add(
            os.path.join(settings.LOGS_DIR, "coalflow.log"),
            level=level or settings.LOG_LEVEL,
            rotation="10 MB",
            serialize=settings.LOG_JSON,
        )
    logger.debug(f"Effective configuration: {settings.describe()}")


settings = Settings()
