# main.py
import sys

from dotenv import load_dotenv

# 先加载 .env，再导入会读取环境变量的配置
load_dotenv()

from src.api.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
