"""
单元测试目录初始化
"""

# 确保unit测试目录是一个有效的Python包
