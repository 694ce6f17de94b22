"""API模块"""