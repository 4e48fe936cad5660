#include <signal.h>
#include <stdlib.h>
#include <sys/wait.h>
#include <unistd.h>

int main(void) {
    pid_t child = fork();
    if (child == 0) {
        pid_t grandchild = fork();
        if (grandchild == 0)
            raise(SIGSEGV);
        waitpid(grandchild, NULL, 0);
        abort();
    }
    waitpid(child, NULL, 0);
    return 0;
}
