"""
测试目录初始化
"""

# 确保tests目录是一个有效的Python包
