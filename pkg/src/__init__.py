# 解耦分片训练桌面实现 - 主模块
