from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-wide defaults, overridable through LYNX_* environment variables or a .env file"""

    model_config = SettingsConfigDict(env_prefix="LYNX_", env_file=".env", case_sensitive=False, extra="ignore")

    # Application Settings
    app_name: str = Field("lynx")
    log_level: str = Field("INFO")
    threads: int = Field(1, ge=1)

    # Sparsification
    eps: float = Field(1e-8, gt=0.0)
    score_eps: float = Field(1e-12, gt=0.0)  # RIA/BaWA denominator guard

    # Kernel tiling (elements)
    tile_m: int = Field(64, ge=1)
    tile_n: int = Field(64, ge=1)
    tile_k: int = Field(256, ge=1)

    # Low-rank compensation
    lora_rank: int = Field(64, ge=1)
    sv_cutoff: float = Field(1e-10, gt=0.0)
    learning_rate: float = Field(1e-3, gt=0.0)
    init_scale: float = Field(1e-5, ge=0.0)
    slim_rank_ratio: float = Field(0.1, gt=0.0, le=1.0)

    # Analysis
    active_threshold: float = Field(0.1, ge=0.0, le=1.0)
    histogram_bins: int = Field(50, ge=1)

    # Benchmarking
    bench_repeats: int = Field(5, ge=3)
    bench_warmup: int = Field(2, ge=0)
    min_timed_ns: int = Field(50_000, ge=0)
    max_repeats: int = Field(1000, ge=3)


settings = Settings()
