from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    # Ambient knobs only: nothing here may change a numerical result.
    LOG_LEVEL: str = "INFO"
    LOG_JSON: bool = False
    TRACE_FLOAT_FORMAT: str = "%.17g"

    model_config = SettingsConfigDict(env_file=".env", env_prefix="SCENEFIT_", extra="ignore")


settings = Settings()
