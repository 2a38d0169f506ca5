from pydantic_settings import BaseSettings

class Settings(BaseSettings):
    RULES_PATH: str = "rules/default.rules"
    DEFAULT_CONFIG_PATH: str = "configs/default.conf"
    LOG_LEVEL: str = "INFO"
    MAX_API_EPISODES: int = 50
    CALIBRATION_FRAMES: int = 2000
    DEBUG: bool = False

    class Config:
        env_file = ".env"

settings = Settings()
