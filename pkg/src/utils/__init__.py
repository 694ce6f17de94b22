"""工具模块"""