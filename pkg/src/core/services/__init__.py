"""
服务层：训练、推理嵌入、消融实验
"""
