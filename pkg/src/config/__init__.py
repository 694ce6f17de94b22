"""配置模块"""