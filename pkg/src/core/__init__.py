"""核心模块"""