"""
集成测试目录初始化
"""
