"""服务模块"""