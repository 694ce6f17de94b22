"""实验室运行环境配置"""
from typing import Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class LoggingSettings(BaseSettings):
    """日志配置"""
    model_config = SettingsConfigDict(env_prefix="LOG_", env_file=".env", extra="ignore")

    level: str = Field(default="INFO")
    format: str = Field(default="json")  # json or text


class MonitoringSettings(BaseSettings):
    """监控配置"""
    model_config = SettingsConfigDict(env_prefix="MONITORING_", env_file=".env", extra="ignore")

    enable_prometheus: bool = Field(default=False)
    prometheus_port: int = Field(default=8001)


class OutputSettings(BaseSettings):
    """产物输出配置（实验配置唯一允许的环境变量覆盖项）"""
    model_config = SettingsConfigDict(env_prefix="LAB_", env_file=".env", extra="ignore")

    output_dir: Optional[str] = Field(default=None)


class Settings(BaseSettings):
    """主配置类"""
    model_config = SettingsConfigDict(env_file=".env", env_file_encoding="utf-8", extra="ignore")

    environment: str = Field(default="development")
    debug: bool = Field(default=False)

    # 子配置
    logging: LoggingSettings = Field(default_factory=LoggingSettings)
    monitoring: MonitoringSettings = Field(default_factory=MonitoringSettings)
    output: OutputSettings = Field(default_factory=OutputSettings)


# 全局设置实例
settings = Settings()
